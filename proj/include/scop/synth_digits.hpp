#pragma once

#include <cstdint>
#include <string>

namespace scop {

// Writes an IDX image/label corpus of procedurally drawn digit glyphs in the
// standard four-file layout (train-images-idx3-ubyte etc). Each glyph is a
// set of digit strokes rasterized with a Gaussian pen under a random affine
// distortion plus pixel noise. Deterministic for a given seed.
void write_synthetic_digit_corpus(const std::string& dir, int64_t n_train, int64_t n_test,
                                  uint64_t seed);

// Ensures the corpus exists at dir (generates it when missing or forced).
void ensure_synthetic_digit_corpus(const std::string& dir, bool force);

}  // namespace scop
