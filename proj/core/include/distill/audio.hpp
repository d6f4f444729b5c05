#pragma once

#include <chrono>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "distill/schema.hpp"

namespace distill {

class AdapterClient;

struct Waveform {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = 16000;

  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
};

/// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

struct MelConfig {
  int sample_rate = 16000;
  std::size_t n_fft = 512;
  double window_ms = 25.0;
  double hop_ms = 10.0;
  std::size_t n_mels = 80;
  double epsilon = 1e-10;
  /// n_mels x (n_fft/2 + 1), nonnegative, every row sums > 0.
  Matrix filterbank;

  std::size_t window_length() const;
  std::size_t hop_length() const;
};

/// HTK-style triangular filters evenly spaced on the mel scale over
/// [0, sample_rate/2]. A filter narrower than one FFT bin gets unit weight on
/// the bin nearest its center so no row is empty.
MelConfig make_mel_config(int sample_rate = 16000, std::size_t n_mels = 80, std::size_t n_fft = 512,
                          double window_ms = 25.0, double hop_ms = 10.0, double epsilon = 1e-10);

double hz_to_mel(double hz);
double mel_to_hz(double mel);
/// Center frequency of filter `index` in Hz.
double mel_center_hz(const MelConfig& cfg, std::size_t index);

struct MelFrames {
  Matrix z;  // n_mels x T
  std::vector<double> frame_times;  // start of each frame, seconds
};

/// z[f][t] = log((M |X_t|^2)_f + eps) over periodic-Hann frames.
/// Throws Error(invalid_argument) when the input is shorter than one window.
MelFrames log_mel(const Waveform& wave, const MelConfig& cfg);

struct SpeechSpan {
  double start_s = 0;
  double end_s = 0;

  double duration() const { return end_s - start_s; }
  friend bool operator==(const SpeechSpan&, const SpeechSpan&) = default;
};

/// Half-open frame interval.
struct FrameRun {
  std::size_t begin = 0;
  std::size_t end = 0;
  friend bool operator==(const FrameRun&, const FrameRun&) = default;
};

struct VadParams {
  double threshold = 0.5;
  std::size_t merge_gap_frames = 10;
  std::size_t min_len_frames = 25;
};

/// Frames with p >= threshold form runs; runs separated by at most
/// merge_gap_frames non-speech frames merge; merged runs shorter than
/// min_len_frames are dropped.
std::vector<FrameRun> vad_frame_runs(std::span<const double> probs, const VadParams& params);
std::vector<SpeechSpan> vad_spans(std::span<const double> probs, double frame_hop_s, const VadParams& params);

constexpr int kUnknownSpeaker = -1;

struct SpeakerSegment {
  SpeechSpan span;
  std::vector<double> embedding;  // unit norm
  std::optional<int> label;
};

/// Average-linkage agglomerative clustering on cosine distance; merges the
/// closest pair while its distance is below `stop_distance`. Labels are
/// 0..k-1 in order of first appearance. Throws on non-unit embeddings or
/// mismatched dimensions.
std::vector<SpeakerSegment> cluster_speakers(std::vector<SpeakerSegment> segments, double stop_distance);

struct Utterance {
  SpeechSpan span;
  std::string text;
  std::optional<std::string> language;
  std::optional<int> speaker;
};

double overlap_seconds(const SpeechSpan& a, const SpeechSpan& b);

/// Each utterance takes the label of the segment with maximum overlap
/// (earlier segment on ties); no overlap gives kUnknownSpeaker.
std::vector<Utterance> assign_speakers(std::vector<Utterance> utterances, std::span<const SpeakerSegment> segments);

std::string speaker_name(int label);

/// One observation per utterance, one speaker entity per label, spoken_by
/// and follows relations. Throws if utterances are not time-ordered.
ContextState build_transcript_state(std::span<const Utterance> utterances, const Provenance& source);

/// RIFF/WAVE PCM16 decoding; multi-channel input is averaged to mono.
Waveform decode_wav(std::string_view bytes);
std::string encode_wav(const Waveform& wave);
/// Little-endian PCM16 samples, clipped to [-1, 1].
std::string to_pcm16(std::span<const double> samples);

struct AudioPipelineConfig {
  VadParams vad;
  double vad_frame_ms = 10.0;
  double cluster_stop_distance = 0.3;
};

struct AudioAdapters {
  AdapterClient* vad = nullptr;
  AdapterClient* embed = nullptr;  // optional
  AdapterClient* asr = nullptr;
};

/// VAD -> spans -> (embeddings -> clustering) -> batched ASR -> alignment.
/// Throws Error with the adapter's code when an adapter call fails.
std::vector<Utterance> transcribe(const Waveform& wave, std::string_view content_hash, const AudioAdapters& adapters,
                                  const AudioPipelineConfig& cfg,
                                  std::optional<std::chrono::milliseconds> budget = std::nullopt);

}  // namespace distill
