#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "scop/rng.hpp"
#include "scop/tensor.hpp"

namespace scop {

struct Dataset {
    Tensor images;                 // N,C,H,W after normalization
    std::vector<int64_t> labels;
    std::string split;             // "train" | "test"
    int64_t num_classes = 10;
    std::vector<double> mean, std;          // per-channel stats applied to images
    std::vector<double> data_min, data_max; // per-channel post-normalization range

    int64_t size() const { return images.dim(0); }
    // Rows `indices` as a batch tensor plus aligned labels.
    Tensor batch(const std::vector<int64_t>& indices) const;
    std::vector<int64_t> batch_labels(const std::vector<int64_t>& indices) const;
};

// Parses IDX files (big-endian): images magic 0x00000803, labels 0x00000801.
// Pixels map u8 -> [0,1], then per-channel normalization. For the test split
// pass the train split's stats so both live in the same space.
std::pair<Dataset, Dataset> load_mnist(const std::string& dir);

// CIFAR-10 binary batches: 3073-byte records, channel-planar RGB 32x32.
std::pair<Dataset, Dataset> load_cifar10(const std::string& dir);

// Synthetic planted problem: a (d,1,1) image with signal_dim iid standard
// normal coordinates and noise_dim standard-normal coordinates correlated
// (null_corr) with the class scores; the label depends only on the signal
// coordinates through a fixed random projection, resampled away from the
// decision margin. The noise coordinates are marginally predictive but null
// conditional on the signal. Returns the dataset and a per-coordinate mask.
struct PlantedData {
    Dataset train, test;
    std::vector<bool> signal_mask;       // length d, true on signal coordinates
    Tensor projection;                   // (num_classes, signal_dim)
    double margin = 0.0;
    double null_corr = 0.0;              // corr of noise coord j with class (j % k) score
};
PlantedData make_planted_dataset(uint64_t seed, int64_t n_train, int64_t n_test,
                                 int64_t signal_dim, int64_t noise_dim, int64_t num_classes,
                                 double null_corr = 0.95);

// Checkpoint container. dtype tags: 0 = f64, 1 = u8 bytes, 2 = i64.
struct Section {
    uint8_t dtype = 0;
    std::vector<int64_t> dims;
    std::string bytes;  // little-endian payload
};
using SectionMap = std::map<std::string, Section>;

void save_checkpoint(const std::string& path, const SectionMap& sections);
SectionMap load_checkpoint(const std::string& path);

Section section_from_tensor(const Tensor& t);
Tensor tensor_from_section(const Section& s);
Section section_from_string(const std::string& text);
std::string string_from_section(const Section& s);
Section section_from_i64(const std::vector<int64_t>& v);
std::vector<int64_t> i64_from_section(const Section& s);

// Writes a dataset's images back out as IDX pairs (used by the synthetic
// corpus generator) and raw float tensors for caches.
void write_idx_images(const std::string& path, const std::vector<uint8_t>& pixels,
                      int64_t n, int64_t h, int64_t w);
void write_idx_labels(const std::string& path, const std::vector<uint8_t>& labels);

}  // namespace scop
