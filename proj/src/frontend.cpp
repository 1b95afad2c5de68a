#include "care/frontend.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace care {

CropResult crop_or_pad(const Waveform& w, double target_seconds, Rng& rng, CropMode mode) {
    if (w.samples.empty()) throw InputError("crop_or_pad: empty waveform");
    if (target_seconds <= 0) throw ConfigError("crop_or_pad: target_seconds must be > 0");

    CropResult res;
    res.wave.sample_rate = w.sample_rate;
    const std::size_t len = w.samples.size();

    if (mode == CropMode::Pretrain) {
        const std::size_t target =
            static_cast<std::size_t>(target_seconds * kSampleRate + 0.5);
        if (len > target) {
            // Offset quantized to the 20 ms hop: frame-level teacher targets
            // computed on the full utterance then stay row-aligned.
            const std::size_t max_off = len - target;
            const std::size_t n_hops = max_off / kSamplesPerFrame + 1;
            res.crop_offset = rng.index(n_hops) * kSamplesPerFrame;
            res.wave.samples.assign(w.samples.begin() + res.crop_offset,
                                    w.samples.begin() + res.crop_offset + target);
            res.n_valid_samples = target;
        } else {
            res.wave.samples = w.samples;
            res.wave.samples.resize(target, 0.0f);
            res.n_valid_samples = len;
        }
        return res;
    }

    // Downstream: deterministic. Head-crop over the max duration, tail-pad
    // under the 1 s minimum, otherwise pass through.
    const std::size_t max_len = static_cast<std::size_t>(target_seconds * kSampleRate + 0.5);
    const std::size_t min_len = kSampleRate;  // 1 second
    if (len > max_len) {
        res.wave.samples.assign(w.samples.begin(), w.samples.begin() + max_len);
        res.n_valid_samples = max_len;
    } else if (len < min_len) {
        res.wave.samples = w.samples;
        res.wave.samples.resize(min_len, 0.0f);
        res.n_valid_samples = len;
    } else {
        res.wave.samples = w.samples;
        res.n_valid_samples = len;
    }
    return res;
}

// ----------------------------------------------------------------------------
// RIFF/WAVE, mono PCM16 at 16 kHz only.
// ----------------------------------------------------------------------------

namespace {

std::uint32_t read_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::string& s, std::uint32_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
    s.push_back(static_cast<char>((v >> 16) & 0xff));
    s.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_u16(std::string& s, std::uint16_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace

Waveform read_wav(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_wav: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 44 || bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0)
        throw InputError("read_wav: " + path + " is not a RIFF/WAVE file");

    const unsigned char* data = reinterpret_cast<const unsigned char*>(bytes.data());
    std::size_t pos = 12;
    bool have_fmt = false;
    std::uint16_t channels = 0, bits = 0;
    std::uint32_t rate = 0;
    Waveform w;
    while (pos + 8 <= bytes.size()) {
        const std::string id = bytes.substr(pos, 4);
        const std::uint32_t chunk_len = read_u32(data + pos + 4);
        pos += 8;
        if (pos + chunk_len > bytes.size())
            throw InputError("read_wav: truncated chunk '" + id + "' in " + path);
        if (id == "fmt ") {
            if (chunk_len < 16) throw InputError("read_wav: short fmt chunk in " + path);
            const std::uint16_t format = read_u16(data + pos);
            channels = read_u16(data + pos + 2);
            rate = read_u32(data + pos + 4);
            bits = read_u16(data + pos + 14);
            if (format != 1) throw InputError("read_wav: " + path + " is not PCM");
            have_fmt = true;
        } else if (id == "data") {
            if (!have_fmt) throw InputError("read_wav: data chunk before fmt in " + path);
            if (channels != 1 || rate != 16000 || bits != 16)
                throw InputError("read_wav: " + path + " must be mono 16-bit 16 kHz, got " +
                                 std::to_string(channels) + " ch, " + std::to_string(rate) +
                                 " Hz, " + std::to_string(bits) + " bit");
            const std::size_t n = chunk_len / 2;
            w.samples.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                const std::int16_t s = static_cast<std::int16_t>(
                    data[pos + 2 * i] | (data[pos + 2 * i + 1] << 8));
                w.samples[i] = static_cast<float>(s) / 32768.0f;
            }
            return w;
        }
        pos += chunk_len + (chunk_len & 1);
    }
    throw InputError("read_wav: no data chunk in " + path);
}

void write_wav(const std::string& path, const Waveform& w) {
    std::string out;
    const std::uint32_t n = static_cast<std::uint32_t>(w.samples.size());
    out.reserve(44 + 2 * n);
    out += "RIFF";
    put_u32(out, 36 + 2 * n);
    out += "WAVEfmt ";
    put_u32(out, 16);
    put_u16(out, 1);                 // PCM
    put_u16(out, 1);                 // mono
    put_u32(out, 16000);             // sample rate
    put_u32(out, 16000 * 2);         // byte rate
    put_u16(out, 2);                 // block align
    put_u16(out, 16);                // bits
    out += "data";
    put_u32(out, 2 * n);
    for (float s : w.samples) {
        const float clamped = std::max(-1.0f, std::min(1.0f, s));
        const std::int16_t q = static_cast<std::int16_t>(std::lrintf(clamped * 32767.0f));
        put_u16(out, static_cast<std::uint16_t>(q));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_wav: cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write_wav: short write to " + path);
}

// ----------------------------------------------------------------------------
// Stride schedule and frame algebra
// ----------------------------------------------------------------------------

std::vector<ExtractorLayerSpec> extractor_schedule(std::size_t width) {
    static const std::size_t kernels[7] = {10, 3, 3, 3, 3, 2, 2};
    static const std::size_t strides[7] = {5, 2, 2, 2, 2, 2, 2};
    const std::size_t half = std::max<std::size_t>(width / 2, 4);
    std::vector<ExtractorLayerSpec> spec;
    std::size_t in_ch = 1;
    for (int i = 0; i < 7; ++i) {
        const std::size_t out_ch = i < 4 ? half : width;
        spec.push_back({kernels[i], strides[i], in_ch, out_ch});
        in_ch = out_ch;
    }
    return spec;
}

std::size_t extractor_num_frames(std::size_t n_samples) {
    std::size_t t = n_samples;
    for (const auto& layer : extractor_schedule(8))
        t = conv1d_out_len(t, layer.kernel, layer.stride, Padding::Same);
    return t;
}

std::vector<std::uint8_t> frame_validity(std::size_t n_samples, std::size_t n_valid_samples,
                                         std::size_t n_frames) {
    // Track (total stride, total left pad) through the schedule so we can map
    // each output frame back to its receptive field in samples.
    std::size_t stride_total = 1;
    std::size_t pad_total = 0;
    std::size_t rf = 1;
    std::size_t t = n_samples;
    for (const auto& layer : extractor_schedule(8)) {
        const std::size_t t_out = conv1d_out_len(t, layer.kernel, layer.stride, Padding::Same);
        const std::size_t span = (t_out - 1) * layer.stride + layer.kernel;
        const std::size_t pad = span > t ? (span - t) / 2 : 0;
        pad_total += pad * stride_total;
        rf += (layer.kernel - 1) * stride_total;
        stride_total *= layer.stride;
        t = t_out;
    }

    std::vector<std::uint8_t> valid(n_frames, 0);
    for (std::size_t f = 0; f < n_frames; ++f) {
        const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(f * stride_total) -
                                     static_cast<std::ptrdiff_t>(pad_total);
        const std::ptrdiff_t end = start + static_cast<std::ptrdiff_t>(rf);
        const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(start, 0);
        const std::ptrdiff_t hi =
            std::min<std::ptrdiff_t>(end, static_cast<std::ptrdiff_t>(n_valid_samples));
        const std::ptrdiff_t overlap = hi > lo ? hi - lo : 0;
        valid[f] = 2 * overlap >= static_cast<std::ptrdiff_t>(rf) ? 1 : 0;
    }
    return valid;
}

}  // namespace care
