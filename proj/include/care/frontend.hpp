#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "care/common.hpp"
#include "care/tensor.hpp"

namespace care {

// Raw mono audio, fixed 16 kHz, amplitudes in [-1, 1].
struct Waveform {
    std::vector<float> samples;
    int sample_rate = 16000;
};

constexpr int kSampleRate = 16000;
constexpr int kFrameRate = 50;
constexpr int kSamplesPerFrame = kSampleRate / kFrameRate;  // 320, one 20 ms hop

enum class CropMode { Pretrain, Downstream };

struct CropResult {
    Waveform wave;
    std::size_t n_valid_samples = 0;  // leading samples that are real signal
    std::size_t crop_offset = 0;      // where the crop started in the source
};

// Pretrain mode: exact target length; random crop start when longer (offset
// quantized to the 20 ms hop so frame-level targets stay aligned), zero tail
// padding when shorter. Downstream mode: crop head to at most target_seconds,
// pad to at least 1 s, otherwise untouched.
CropResult crop_or_pad(const Waveform& w, double target_seconds, Rng& rng, CropMode mode);

Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& w);

// ----------------------------------------------------------------------------
// Convolutional feature extractor: 7 layers, kernels (10,3,3,3,3,2,2) and
// strides (5,2,2,2,2,2,2), total hop 320 samples = 20 ms at 16 kHz. Each layer
// is conv -> bias -> layer norm over channels -> gelu. Early layers run at
// half width, the last three at full model width.
// ----------------------------------------------------------------------------

struct ExtractorLayerSpec {
    std::size_t kernel, stride, in_ch, out_ch;
};

std::vector<ExtractorLayerSpec> extractor_schedule(std::size_t width);

// Frame count after the full stride schedule (ceil at every layer).
std::size_t extractor_num_frames(std::size_t n_samples);

// Validity flags: a frame is invalid when less than half of its receptive
// field overlaps the un-padded part of the waveform.
std::vector<std::uint8_t> frame_validity(std::size_t n_samples, std::size_t n_valid_samples,
                                         std::size_t n_frames);

template <typename S>
struct ExtractorLayerT {
    TensorT<S> kernel;  // [K, Cin, Cout]
    TensorT<S> bias;    // [Cout]
    TensorT<S> ln_gain, ln_bias;
    std::size_t stride = 1;
};

template <typename S>
struct ExtractorT {
    std::vector<ExtractorLayerT<S>> layers;
    std::size_t width = 0;
};

template <typename S>
struct FrameSequenceT {
    TensorT<S> frames;  // [T, D]
    std::vector<std::uint8_t> valid;
    int frame_rate = kFrameRate;
    std::size_t num_frames() const { return frames.dim(0); }
};

using FrameSequence = FrameSequenceT<float>;

template <typename S>
ExtractorT<S> extractor_init(std::size_t width, Rng& rng) {
    ExtractorT<S> ex;
    ex.width = width;
    for (const auto& spec : extractor_schedule(width)) {
        ExtractorLayerT<S> layer;
        layer.stride = spec.stride;
        const double bound = std::sqrt(6.0 / (spec.kernel * spec.in_ch + spec.out_ch));
        std::vector<S> k(spec.kernel * spec.in_ch * spec.out_ch);
        for (auto& v : k) v = static_cast<S>(rng.uniform(-bound, bound));
        layer.kernel = TensorT<S>::from_data({spec.kernel, spec.in_ch, spec.out_ch}, std::move(k));
        layer.bias = TensorT<S>::zeros({spec.out_ch});
        layer.ln_gain = TensorT<S>::full({spec.out_ch}, S(1));
        layer.ln_bias = TensorT<S>::zeros({spec.out_ch});
        ex.layers.push_back(std::move(layer));
    }
    return ex;
}

// Waveform (or any [T,1] signal tensor) -> [T', C] frame representations.
template <typename S>
TensorT<S> extractor_forward(const ExtractorT<S>& ex, const TensorT<S>& signal) {
    TensorT<S> x = signal;
    for (const auto& layer : ex.layers) {
        x = conv1d(x, layer.kernel, layer.stride, Padding::Same);
        x = add_rowvec(x, layer.bias);
        x = layer_norm(x, layer.ln_gain, layer.ln_bias, S(1e-5));
        x = gelu(x);
    }
    return x;
}

template <typename S>
FrameSequenceT<S> extract_frames(const ExtractorT<S>& ex, const Waveform& w,
                                 std::size_t n_valid_samples) {
    if (w.samples.size() < static_cast<std::size_t>(kSamplesPerFrame))
        throw InputError("extract_frames: need at least " + std::to_string(kSamplesPerFrame) +
                         " samples (one hop), got " + std::to_string(w.samples.size()));
    std::vector<S> sig(w.samples.size());
    for (std::size_t i = 0; i < sig.size(); ++i) sig[i] = static_cast<S>(w.samples[i]);
    TensorT<S> signal = TensorT<S>::from_data({sig.size(), 1}, std::move(sig));
    FrameSequenceT<S> out;
    out.frames = extractor_forward(ex, signal);
    out.valid = frame_validity(w.samples.size(), n_valid_samples, out.frames.dim(0));
    return out;
}

template <typename S>
FrameSequenceT<S> extract_frames(const ExtractorT<S>& ex, const Waveform& w) {
    return extract_frames(ex, w, w.samples.size());
}

}  // namespace care
