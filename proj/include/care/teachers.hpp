#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "care/frontend.hpp"
#include "care/transformer.hpp"

// Desk-scale supervision stand-ins. The semantic teacher is a frozen,
// seed-fixed pseudo-text encoder producing one utterance-level embedding per
// transcript; the acoustic teacher is a DSP pipeline producing frame-level
// low-level descriptors. Both are pure functions after construction.

namespace care {

constexpr int kVocabSize = 1000;
constexpr std::uint64_t kTeacherSeed = 0x7ec0ffee5eed1ULL;

// Lowercased whitespace tokens hashed with 64-bit FNV-1a into [1, V);
// the empty transcript maps to the single reserved id 0.
std::vector<int> tokenize(const std::string& transcript);

std::uint64_t fnv1a64(const std::string& s);

class SemanticTeacher {
public:
    SemanticTeacher(std::size_t dim, std::size_t heads, std::size_t n_layers, std::uint64_t seed);

    // y_text: mean-pooled contextual embedding of the token sequence.
    std::vector<float> embed(const std::vector<int>& tokens) const;

    std::size_t dim() const { return dim_; }
    const std::vector<TransformerLayerT<float>>& layers() const { return layers_; }

private:
    std::size_t dim_, heads_;
    Tensor embedding_;  // [V, dim]
    std::vector<TransformerLayerT<float>> layers_;
};

// Simple dense row-major matrix for descriptor streams.
struct FloatMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<float> v;
    float& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
    float at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

// Descriptor layout: n_mel filterbank log-energies, then log frame energy,
// zero-crossing rate, pitch proxy (Hz/500) and voicing proxy, all at 100 Hz
// (25 ms Hann window, 10 ms hop). D = n_mel + 4.
FloatMatrix acoustic_teacher_lld(const Waveform& w, std::size_t n_mel);

// 100 Hz -> 50 Hz by averaging consecutive row pairs; odd trailing row dropped.
FloatMatrix downsample_targets(const FloatMatrix& lld);

// Rows [row0, row0+t) of `targets`, zero-filled past the end. The validity
// flag marks rows actually backed by descriptor data.
struct AlignedTargets {
    FloatMatrix rows;
    std::vector<std::uint8_t> covered;
};
AlignedTargets align_targets(const FloatMatrix& targets, std::size_t row0, std::size_t t);

}  // namespace care
