#include "scop/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "scop/common.hpp"
#include "scop/digest.hpp"

namespace scop {

Tensor Dataset::batch(const std::vector<int64_t>& indices) const {
    const int64_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
    const int64_t ex = c * h * w;
    Tensor out({static_cast<int64_t>(indices.size()), c, h, w});
    for (size_t i = 0; i < indices.size(); ++i) {
        const int64_t idx = indices[i];
        require(idx >= 0 && idx < size(), "batch: index ", idx, " out of range [0,", size(), ")");
        std::memcpy(out.ptr() + static_cast<int64_t>(i) * ex, images.ptr() + idx * ex,
                    static_cast<size_t>(ex) * sizeof(double));
    }
    return out;
}

std::vector<int64_t> Dataset::batch_labels(const std::vector<int64_t>& indices) const {
    std::vector<int64_t> out(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) {
        require(indices[i] >= 0 && indices[i] < size(), "batch_labels: index ", indices[i],
                " out of range");
        out[i] = labels[static_cast<size_t>(indices[i])];
    }
    return out;
}

// ---- low-level file plumbing --------------------------------------------

static std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot open file '", path, "'");
    std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    require(!f.bad(), "read failure on '", path, "'");
    return data;
}

static void write_file(const std::string& path, const std::string& data) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), "cannot open '", path, "' for writing");
    f.write(data.data(), static_cast<std::streamsize>(data.size()));
    f.flush();
    require(f.good(), "write failure on '", path, "'");
}

namespace {
// Bounds-checked reader; every overrun is a parse error, never UB.
struct Cursor {
    const std::string& buf;
    size_t pos = 0;
    std::string what;

    const uint8_t* take(size_t n) {
        require(pos + n <= buf.size() && pos + n >= pos, what, ": truncated, need ", n,
                " bytes at offset ", pos, ", file has ", buf.size());
        const uint8_t* p = reinterpret_cast<const uint8_t*>(buf.data()) + pos;
        pos += n;
        return p;
    }
    uint8_t u8() { return take(1)[0]; }
    uint32_t u32_be() {
        const uint8_t* p = take(4);
        return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) |
               uint32_t(p[3]);
    }
    uint32_t u32_le() {
        const uint8_t* p = take(4);
        return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) |
               (uint32_t(p[3]) << 24);
    }
    uint64_t u64_le() {
        const uint8_t* p = take(8);
        uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
        return v;
    }
    int64_t i64_le() { return static_cast<int64_t>(u64_le()); }
};

void put_u32_be(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>((v >> 24) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>(v & 0xff));
}
void put_u32_le(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64_le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
}  // namespace

// ---- IDX -----------------------------------------------------------------

struct IdxImages {
    int64_t n, h, w;
    std::vector<uint8_t> pixels;
};

static IdxImages parse_idx_images(const std::string& path) {
    std::string buf = read_file(path);
    Cursor c{buf, 0, "IDX '" + path + "'"};
    const uint32_t magic = c.u32_be();
    require(magic == 0x00000803u, c.what, ": wrong image magic, expected 0x00000803, found 0x",
            std::hex, magic);
    IdxImages out;
    out.n = c.u32_be();
    out.h = c.u32_be();
    out.w = c.u32_be();
    require(out.n > 0 && out.h > 0 && out.w > 0, c.what, ": non-positive dimension ", out.n,
            "x", out.h, "x", out.w);
    require(out.h <= 4096 && out.w <= 4096, c.what, ": implausible image size ", out.h, "x",
            out.w);
    const uint64_t count = static_cast<uint64_t>(out.n) * static_cast<uint64_t>(out.h) *
                           static_cast<uint64_t>(out.w);
    const uint8_t* p = c.take(count);
    out.pixels.assign(p, p + count);
    require(c.pos == buf.size(), c.what, ": ", buf.size() - c.pos, " trailing bytes");
    return out;
}

static std::vector<uint8_t> parse_idx_labels(const std::string& path) {
    std::string buf = read_file(path);
    Cursor c{buf, 0, "IDX '" + path + "'"};
    const uint32_t magic = c.u32_be();
    require(magic == 0x00000801u, c.what, ": wrong label magic, expected 0x00000801, found 0x",
            std::hex, magic);
    const uint32_t n = c.u32_be();
    require(n > 0, c.what, ": empty label file");
    const uint8_t* p = c.take(n);
    std::vector<uint8_t> labels(p, p + n);
    require(c.pos == buf.size(), c.what, ": ", buf.size() - c.pos, " trailing bytes");
    return labels;
}

void write_idx_images(const std::string& path, const std::vector<uint8_t>& pixels,
                      int64_t n, int64_t h, int64_t w) {
    require(static_cast<int64_t>(pixels.size()) == n * h * w,
            "write_idx_images: pixel count mismatch");
    std::string out;
    put_u32_be(out, 0x00000803u);
    put_u32_be(out, static_cast<uint32_t>(n));
    put_u32_be(out, static_cast<uint32_t>(h));
    put_u32_be(out, static_cast<uint32_t>(w));
    out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
    write_file(path, out);
}

void write_idx_labels(const std::string& path, const std::vector<uint8_t>& labels) {
    std::string out;
    put_u32_be(out, 0x00000801u);
    put_u32_be(out, static_cast<uint32_t>(labels.size()));
    out.append(reinterpret_cast<const char*>(labels.data()), labels.size());
    write_file(path, out);
}

// ---- normalization -------------------------------------------------------

static void compute_channel_stats(const Tensor& images, std::vector<double>& mean,
                                  std::vector<double>& std) {
    const int64_t n = images.dim(0), c = images.dim(1), plane = images.dim(2) * images.dim(3);
    mean.assign(static_cast<size_t>(c), 0.0);
    std.assign(static_cast<size_t>(c), 0.0);
    const double count = static_cast<double>(n * plane);
    for (int64_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (int64_t b = 0; b < n; ++b) {
            const double* p = images.ptr() + (b * c + ch) * plane;
            for (int64_t i = 0; i < plane; ++i) s += p[i];
        }
        const double mu = s / count;
        double ss = 0.0;
        for (int64_t b = 0; b < n; ++b) {
            const double* p = images.ptr() + (b * c + ch) * plane;
            for (int64_t i = 0; i < plane; ++i) ss += (p[i] - mu) * (p[i] - mu);
        }
        mean[static_cast<size_t>(ch)] = mu;
        std[static_cast<size_t>(ch)] = std::max(std::sqrt(ss / count), 1e-8);
    }
}

static void apply_normalization(Dataset& ds, const std::vector<double>& mean,
                                const std::vector<double>& std) {
    const int64_t n = ds.images.dim(0), c = ds.images.dim(1),
                  plane = ds.images.dim(2) * ds.images.dim(3);
    for (int64_t ch = 0; ch < c; ++ch) {
        const double mu = mean[static_cast<size_t>(ch)], sd = std[static_cast<size_t>(ch)];
        for (int64_t b = 0; b < n; ++b) {
            double* p = ds.images.ptr() + (b * c + ch) * plane;
            for (int64_t i = 0; i < plane; ++i) p[i] = (p[i] - mu) / sd;
        }
    }
    ds.mean = mean;
    ds.std = std;
}

static void record_channel_range(Dataset& ds) {
    const int64_t n = ds.images.dim(0), c = ds.images.dim(1),
                  plane = ds.images.dim(2) * ds.images.dim(3);
    ds.data_min.assign(static_cast<size_t>(c), std::numeric_limits<double>::infinity());
    ds.data_max.assign(static_cast<size_t>(c), -std::numeric_limits<double>::infinity());
    for (int64_t ch = 0; ch < c; ++ch) {
        double lo = ds.data_min[static_cast<size_t>(ch)], hi = ds.data_max[static_cast<size_t>(ch)];
        for (int64_t b = 0; b < n; ++b) {
            const double* p = ds.images.ptr() + (b * c + ch) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                lo = std::min(lo, p[i]);
                hi = std::max(hi, p[i]);
            }
        }
        ds.data_min[static_cast<size_t>(ch)] = lo;
        ds.data_max[static_cast<size_t>(ch)] = hi;
    }
}

// ---- MNIST ----------------------------------------------------------------

static Dataset images_to_dataset(const IdxImages& imgs, const std::vector<uint8_t>& labels,
                                 const std::string& split, int64_t num_classes) {
    require(static_cast<int64_t>(labels.size()) == imgs.n, "IDX: ", labels.size(),
            " labels for ", imgs.n, " images");
    Dataset ds;
    ds.split = split;
    ds.num_classes = num_classes;
    ds.images = Tensor({imgs.n, 1, imgs.h, imgs.w});
    for (size_t i = 0; i < imgs.pixels.size(); ++i)
        ds.images.data[static_cast<int64_t>(i)] = static_cast<double>(imgs.pixels[i]) / 255.0;
    ds.labels.reserve(labels.size());
    for (uint8_t l : labels) {
        require(l < num_classes, "IDX: label ", int(l), " out of range [0,", num_classes, ")");
        ds.labels.push_back(l);
    }
    return ds;
}

std::pair<Dataset, Dataset> load_mnist(const std::string& dir) {
    Dataset train = images_to_dataset(parse_idx_images(dir + "/train-images-idx3-ubyte"),
                                      parse_idx_labels(dir + "/train-labels-idx1-ubyte"),
                                      "train", 10);
    Dataset test = images_to_dataset(parse_idx_images(dir + "/t10k-images-idx3-ubyte"),
                                     parse_idx_labels(dir + "/t10k-labels-idx1-ubyte"),
                                     "test", 10);
    std::vector<double> mean, std;
    compute_channel_stats(train.images, mean, std);
    apply_normalization(train, mean, std);
    apply_normalization(test, mean, std);
    record_channel_range(train);
    record_channel_range(test);
    return {std::move(train), std::move(test)};
}

// ---- CIFAR-10 --------------------------------------------------------------

static void parse_cifar_batch(const std::string& path, Dataset& ds, int64_t offset) {
    std::string buf = read_file(path);
    require(buf.size() % 3073 == 0, "CIFAR file '", path, "': size ", buf.size(),
            " is not a multiple of 3073");
    const int64_t n = static_cast<int64_t>(buf.size() / 3073);
    const uint8_t* p = reinterpret_cast<const uint8_t*>(buf.data());
    for (int64_t i = 0; i < n; ++i) {
        const uint8_t* rec = p + i * 3073;
        require(rec[0] < 10, "CIFAR file '", path, "': label ", int(rec[0]), " out of range");
        ds.labels[static_cast<size_t>(offset + i)] = rec[0];
        double* dst = ds.images.ptr() + (offset + i) * 3072;
        for (int64_t j = 0; j < 3072; ++j) dst[j] = static_cast<double>(rec[1 + j]) / 255.0;
    }
}

std::pair<Dataset, Dataset> load_cifar10(const std::string& dir) {
    const std::vector<std::string> train_files = {
        "data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
        "data_batch_4.bin", "data_batch_5.bin"};
    int64_t train_n = 0;
    std::vector<int64_t> counts;
    for (const auto& f : train_files) {
        std::string buf = read_file(dir + "/" + f);
        require(buf.size() % 3073 == 0, "CIFAR file '", dir + "/" + f, "': size ", buf.size(),
                " is not a multiple of 3073");
        counts.push_back(static_cast<int64_t>(buf.size() / 3073));
        train_n += counts.back();
    }
    Dataset train;
    train.split = "train";
    train.num_classes = 10;
    train.images = Tensor({train_n, 3, 32, 32});
    train.labels.assign(static_cast<size_t>(train_n), 0);
    int64_t offset = 0;
    for (size_t i = 0; i < train_files.size(); ++i) {
        parse_cifar_batch(dir + "/" + train_files[i], train, offset);
        offset += counts[i];
    }
    std::string test_buf = read_file(dir + "/test_batch.bin");
    require(test_buf.size() % 3073 == 0, "CIFAR file '", dir, "/test_batch.bin': size ",
            test_buf.size(), " is not a multiple of 3073");
    const int64_t test_n = static_cast<int64_t>(test_buf.size() / 3073);
    Dataset test;
    test.split = "test";
    test.num_classes = 10;
    test.images = Tensor({test_n, 3, 32, 32});
    test.labels.assign(static_cast<size_t>(test_n), 0);
    parse_cifar_batch(dir + "/test_batch.bin", test, 0);
    std::vector<double> mean, std;
    compute_channel_stats(train.images, mean, std);
    apply_normalization(train, mean, std);
    apply_normalization(test, mean, std);
    record_channel_range(train);
    record_channel_range(test);
    return {std::move(train), std::move(test)};
}

// ---- planted problem --------------------------------------------------------

// Noise coordinate j is a noisy copy of the class-(j % k) score: null given
// the signal coordinates, yet marginally predictive. Its variance is close to
// one but slightly inflated, because margin rejection widens the scores.
static void fill_planted_split(Dataset& ds, int64_t n, int64_t sd, int64_t nd, int64_t k,
                               const Tensor& proj, double margin, double null_corr, Rng& rng) {
    const int64_t d = sd + nd;
    const double fresh_sd = std::sqrt(1.0 - null_corr * null_corr);
    ds.images = Tensor({n, d, 1, 1});
    ds.labels.assign(static_cast<size_t>(n), 0);
    std::vector<double> sig(static_cast<size_t>(sd));
    std::vector<double> scores(static_cast<size_t>(k));
    for (int64_t i = 0; i < n; ++i) {
        int64_t label = 0;
        for (int attempt = 0; attempt < 200; ++attempt) {
            for (auto& v : sig) v = rng.normal();
            for (int64_t c = 0; c < k; ++c) {
                double s = 0.0;
                for (int64_t j = 0; j < sd; ++j) s += proj.data[c * sd + j] * sig[static_cast<size_t>(j)];
                scores[static_cast<size_t>(c)] = s;
            }
            int64_t best = 0;
            for (int64_t c = 1; c < k; ++c)
                if (scores[static_cast<size_t>(c)] > scores[static_cast<size_t>(best)]) best = c;
            double second = -std::numeric_limits<double>::infinity();
            for (int64_t c = 0; c < k; ++c)
                if (c != best) second = std::max(second, scores[static_cast<size_t>(c)]);
            if (scores[static_cast<size_t>(best)] - second >= margin) {
                label = best;
                break;
            }
        }
        ds.labels[static_cast<size_t>(i)] = label;
        double* row = ds.images.ptr() + i * d;
        for (int64_t j = 0; j < sd; ++j) row[j] = sig[static_cast<size_t>(j)];
        for (int64_t j = 0; j < nd; ++j)
            row[sd + j] = null_corr * scores[static_cast<size_t>(j % k)] +
                          fresh_sd * rng.normal();
    }
}

PlantedData make_planted_dataset(uint64_t seed, int64_t n_train, int64_t n_test,
                                 int64_t signal_dim, int64_t noise_dim, int64_t num_classes,
                                 double null_corr) {
    require(signal_dim > 0 && noise_dim > 0, "planted dataset needs positive dimensions");
    require(num_classes >= 2, "planted dataset needs at least 2 classes");
    require(null_corr >= 0.0 && null_corr < 1.0, "null correlation must lie in [0, 1)");
    PlantedData out;
    out.margin = 0.25;
    out.null_corr = null_corr;
    Rng proj_rng = Rng::stream(seed, "planted.proj");
    out.projection = Tensor({num_classes, signal_dim});
    for (int64_t c = 0; c < num_classes; ++c) {
        double norm = 0.0;
        for (int64_t j = 0; j < signal_dim; ++j) {
            const double v = proj_rng.normal();
            out.projection.data[c * signal_dim + j] = v;
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (int64_t j = 0; j < signal_dim; ++j) out.projection.data[c * signal_dim + j] /= norm;
    }
    const int64_t d = signal_dim + noise_dim;
    out.signal_mask.assign(static_cast<size_t>(d), false);
    for (int64_t j = 0; j < signal_dim; ++j) out.signal_mask[static_cast<size_t>(j)] = true;

    Rng train_rng = Rng::stream(seed, "planted.train");
    Rng test_rng = Rng::stream(seed, "planted.test");
    out.train.split = "train";
    out.test.split = "test";
    out.train.num_classes = out.test.num_classes = num_classes;
    fill_planted_split(out.train, n_train, signal_dim, noise_dim, num_classes, out.projection,
                       out.margin, null_corr, train_rng);
    fill_planted_split(out.test, n_test, signal_dim, noise_dim, num_classes, out.projection,
                       out.margin, null_corr, test_rng);
    out.train.mean.assign(static_cast<size_t>(d), 0.0);
    out.train.std.assign(static_cast<size_t>(d), 1.0);
    out.test.mean = out.train.mean;
    out.test.std = out.train.std;
    record_channel_range(out.train);
    record_channel_range(out.test);
    return out;
}

// ---- checkpoint container ----------------------------------------------------

static constexpr char kCkptMagic[8] = {'S', 'C', 'O', 'P', 'C', 'K', 'P', 'T'};
static constexpr uint32_t kCkptVersion = 1;

static size_t dtype_size(uint8_t dtype) {
    switch (dtype) {
        case 0: return 8;  // f64
        case 1: return 1;  // u8
        case 2: return 8;  // i64
    }
    fail("checkpoint: unknown dtype tag ", int(dtype));
}

void save_checkpoint(const std::string& path, const SectionMap& sections) {
    std::string out(kCkptMagic, sizeof(kCkptMagic));
    put_u32_le(out, kCkptVersion);
    put_u32_le(out, static_cast<uint32_t>(sections.size()));
    for (const auto& [name, sec] : sections) {
        require(!name.empty() && name.size() < (1u << 16), "checkpoint: bad section name length ",
                name.size());
        uint64_t numel = 1;
        for (int64_t dim : sec.dims) {
            require(dim >= 0, "checkpoint: negative dim in section '", name, "'");
            numel *= static_cast<uint64_t>(dim);
        }
        require(numel * dtype_size(sec.dtype) == sec.bytes.size(), "checkpoint: section '",
                name, "' payload size ", sec.bytes.size(), " does not match dims");
        put_u32_le(out, static_cast<uint32_t>(name.size()));
        out += name;
        out.push_back(static_cast<char>(sec.dtype));
        put_u32_le(out, static_cast<uint32_t>(sec.dims.size()));
        for (int64_t dim : sec.dims) put_u64_le(out, static_cast<uint64_t>(dim));
        put_u64_le(out, sec.bytes.size());
        out += sec.bytes;
        put_u32_le(out, crc32_of(sec.bytes.data(), sec.bytes.size()));
    }
    write_file(path, out);
}

SectionMap load_checkpoint(const std::string& path) {
    std::string buf = read_file(path);
    Cursor c{buf, 0, "checkpoint '" + path + "'"};
    const uint8_t* magic = c.take(8);
    require(std::memcmp(magic, kCkptMagic, 8) == 0, c.what, ": bad magic");
    const uint32_t version = c.u32_le();
    require(version == kCkptVersion, c.what, ": unsupported version ", version);
    const uint32_t count = c.u32_le();
    require(count < (1u << 20), c.what, ": implausible section count ", count);
    SectionMap out;
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = c.u32_le();
        require(name_len > 0 && name_len < (1u << 16), c.what, ": bad section name length ",
                name_len);
        const uint8_t* nm = c.take(name_len);
        std::string name(reinterpret_cast<const char*>(nm), name_len);
        Section sec;
        sec.dtype = c.u8();
        require(sec.dtype <= 2, c.what, ": unknown dtype tag ", int(sec.dtype),
                " in section '", name, "'");
        const uint32_t rank = c.u32_le();
        require(rank <= 8, c.what, ": implausible rank ", rank, " in section '", name, "'");
        uint64_t numel = 1;
        for (uint32_t r = 0; r < rank; ++r) {
            const int64_t dim = c.i64_le();
            require(dim >= 0 && dim <= (int64_t(1) << 33), c.what, ": bad dim ", dim,
                    " in section '", name, "'");
            sec.dims.push_back(dim);
            numel *= static_cast<uint64_t>(dim);
            require(numel <= (uint64_t(1) << 40), c.what, ": section '", name, "' too large");
        }
        const uint64_t payload = c.u64_le();
        require(payload == numel * dtype_size(sec.dtype), c.what, ": section '", name,
                "' payload size ", payload, " does not match dims");
        const uint8_t* p = c.take(payload);
        sec.bytes.assign(reinterpret_cast<const char*>(p), payload);
        const uint32_t crc = c.u32_le();
        require(crc == crc32_of(sec.bytes.data(), sec.bytes.size()), c.what,
                ": CRC mismatch in section '", name, "'");
        require(!out.count(name), c.what, ": duplicate section '", name, "'");
        out.emplace(std::move(name), std::move(sec));
    }
    require(c.pos == buf.size(), c.what, ": ", buf.size() - c.pos, " trailing bytes");
    return out;
}

Section section_from_tensor(const Tensor& t) {
    Section s;
    s.dtype = 0;
    s.dims = t.shape;
    s.bytes.resize(static_cast<size_t>(t.numel()) * 8);
    std::memcpy(s.bytes.data(), t.ptr(), s.bytes.size());
    return s;
}

Tensor tensor_from_section(const Section& s) {
    require(s.dtype == 0, "section is not an f64 tensor (dtype ", int(s.dtype), ")");
    Tensor t(s.dims);
    require(s.bytes.size() == static_cast<size_t>(t.numel()) * 8, "section payload mismatch");
    std::memcpy(t.ptr(), s.bytes.data(), s.bytes.size());
    require(t.all_finite(), "section tensor has non-finite values");
    return t;
}

Section section_from_string(const std::string& text) {
    Section s;
    s.dtype = 1;
    s.dims = {static_cast<int64_t>(text.size())};
    s.bytes = text;
    return s;
}

std::string string_from_section(const Section& s) {
    require(s.dtype == 1, "section is not a byte string (dtype ", int(s.dtype), ")");
    return s.bytes;
}

Section section_from_i64(const std::vector<int64_t>& v) {
    Section s;
    s.dtype = 2;
    s.dims = {static_cast<int64_t>(v.size())};
    s.bytes.resize(v.size() * 8);
    for (size_t i = 0; i < v.size(); ++i) {
        uint64_t u = static_cast<uint64_t>(v[i]);
        for (int b = 0; b < 8; ++b) s.bytes[i * 8 + b] = static_cast<char>((u >> (8 * b)) & 0xff);
    }
    return s;
}

std::vector<int64_t> i64_from_section(const Section& s) {
    require(s.dtype == 2, "section is not an i64 vector (dtype ", int(s.dtype), ")");
    require(s.bytes.size() % 8 == 0, "i64 section payload not a multiple of 8");
    std::vector<int64_t> out(s.bytes.size() / 8);
    for (size_t i = 0; i < out.size(); ++i) {
        uint64_t u = 0;
        for (int b = 7; b >= 0; --b)
            u = (u << 8) | static_cast<uint8_t>(s.bytes[i * 8 + static_cast<size_t>(b)]);
        out[i] = static_cast<int64_t>(u);
    }
    return out;
}

}  // namespace scop
