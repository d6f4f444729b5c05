#include "distill/audio.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>
#include <set>

#include "distill/adapters.hpp"

namespace distill {

using nlohmann::json;

namespace {

// FFTW planning is not thread-safe; execution on distinct plans is.
std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    std::lock_guard lock(fftw_planner_mutex());
    in_ = fftw_alloc_real(n);
    out_ = fftw_alloc_complex(n / 2 + 1);
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_, out_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(plan_);
    fftw_free(in_);
    fftw_free(out_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_; }

  /// |X_k|^2 for k = 0..n/2.
  void power(std::vector<double>& out) {
    fftw_execute(plan_);
    out.resize(n_ / 2 + 1);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = out_[k][0] * out_[k][0] + out_[k][1] * out_[k][1];
  }

 private:
  std::size_t n_;
  double* in_ = nullptr;
  fftw_complex* out_ = nullptr;
  fftw_plan plan_ = nullptr;
};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

std::uint32_t get_u32(std::string_view b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[at + static_cast<std::size_t>(i)]);
  return v;
}

std::uint16_t get_u16(std::string_view b, std::size_t at) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(b[at]) |
                                    (static_cast<unsigned char>(b[at + 1]) << 8));
}

double cosine_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return 1.0 - dot;
}

Error adapter_error(const AdapterResponse& r, const std::string& what) {
  const auto& e = r.error.value_or(AdapterFailure{ErrorCode::protocol, "unknown failure"});
  return Error(e.code, what + ": " + e.message);
}

}  // namespace

std::size_t MelConfig::window_length() const {
  return static_cast<std::size_t>(std::llround(window_ms * sample_rate / 1000.0));
}

std::size_t MelConfig::hop_length() const {
  return static_cast<std::size_t>(std::llround(hop_ms * sample_rate / 1000.0));
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

double mel_center_hz(const MelConfig& cfg, std::size_t index) {
  const double top = hz_to_mel(cfg.sample_rate / 2.0);
  return mel_to_hz(top * static_cast<double>(index + 1) / static_cast<double>(cfg.n_mels + 1));
}

MelConfig make_mel_config(int sample_rate, std::size_t n_mels, std::size_t n_fft, double window_ms, double hop_ms,
                          double epsilon) {
  MelConfig cfg;
  cfg.sample_rate = sample_rate;
  cfg.n_mels = n_mels;
  cfg.n_fft = n_fft;
  cfg.window_ms = window_ms;
  cfg.hop_ms = hop_ms;
  cfg.epsilon = epsilon;
  if (sample_rate <= 0 || n_mels == 0 || epsilon <= 0.0 || window_ms <= 0.0 || hop_ms <= 0.0) {
    throw Error(ErrorCode::invalid_argument, "mel config needs positive rate, bands, window, hop and epsilon");
  }
  if (cfg.window_length() > n_fft || cfg.hop_length() == 0) {
    throw Error(ErrorCode::invalid_argument, "window must fit in n_fft and hop must be at least one sample");
  }
  const std::size_t bins = n_fft / 2 + 1;
  cfg.filterbank = Matrix(n_mels, bins);
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  }
  const double bin_hz = static_cast<double>(sample_rate) / static_cast<double>(n_fft);
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double left = edges[m];
    const double center = edges[m + 1];
    const double right = edges[m + 2];
    double sum = 0.0;
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      double w = 0.0;
      if (f > left && f <= center) {
        w = (f - left) / (center - left);
      } else if (f > center && f < right) {
        w = (right - f) / (right - center);
      }
      cfg.filterbank(m, k) = w;
      sum += w;
    }
    if (sum <= 0.0) {
      const auto nearest = static_cast<std::size_t>(std::llround(center / bin_hz));
      cfg.filterbank(m, std::min(nearest, bins - 1)) = 1.0;
    }
  }
  return cfg;
}

MelFrames log_mel(const Waveform& wave, const MelConfig& cfg) {
  const std::size_t win = cfg.window_length();
  const std::size_t hop = cfg.hop_length();
  const std::size_t bins = cfg.n_fft / 2 + 1;
  if (cfg.filterbank.rows != cfg.n_mels || cfg.filterbank.cols != bins) {
    throw Error(ErrorCode::invalid_argument, "filterbank shape does not match n_mels x (n_fft/2+1)");
  }
  if (wave.samples.size() < win || win == 0) {
    throw Error(ErrorCode::invalid_argument, "waveform shorter than one analysis window (" + std::to_string(win) +
                                                 " samples)");
  }
  const std::size_t frames = 1 + (wave.samples.size() - win) / hop;
  std::vector<double> window(win);
  for (std::size_t n = 0; n < win; ++n) {
    window[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(win));
  }

  MelFrames out;
  out.z = Matrix(cfg.n_mels, frames);
  out.frame_times.resize(frames);
  RealFft fft(cfg.n_fft);
  std::vector<double> power;
  for (std::size_t t = 0; t < frames; ++t) {
    double* in = fft.input();
    std::fill(in, in + cfg.n_fft, 0.0);
    const std::size_t offset = t * hop;
    for (std::size_t n = 0; n < win; ++n) in[n] = wave.samples[offset + n] * window[n];
    fft.power(power);
    for (std::size_t f = 0; f < cfg.n_mels; ++f) {
      double acc = 0.0;
      for (std::size_t k = 0; k < bins; ++k) acc += cfg.filterbank(f, k) * power[k];
      out.z(f, t) = std::log(acc + cfg.epsilon);
    }
    out.frame_times[t] = static_cast<double>(offset) / wave.sample_rate;
  }
  return out;
}

std::vector<FrameRun> vad_frame_runs(std::span<const double> probs, const VadParams& params) {
  std::vector<FrameRun> runs;
  for (std::size_t i = 0; i < probs.size();) {
    if (probs[i] < params.threshold) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < probs.size() && probs[j] >= params.threshold) ++j;
    if (!runs.empty() && i - runs.back().end <= params.merge_gap_frames) {
      runs.back().end = j;
    } else {
      runs.push_back({i, j});
    }
    i = j;
  }
  std::erase_if(runs, [&](const FrameRun& r) { return r.end - r.begin < params.min_len_frames; });
  return runs;
}

std::vector<SpeechSpan> vad_spans(std::span<const double> probs, double frame_hop_s, const VadParams& params) {
  std::vector<SpeechSpan> spans;
  for (const auto& run : vad_frame_runs(probs, params)) {
    spans.push_back({static_cast<double>(run.begin) * frame_hop_s, static_cast<double>(run.end) * frame_hop_s});
  }
  return spans;
}

std::vector<SpeakerSegment> cluster_speakers(std::vector<SpeakerSegment> segments, double stop_distance) {
  const std::size_t n = segments.size();
  if (n == 0) return segments;
  const std::size_t dim = segments.front().embedding.size();
  for (const auto& s : segments) {
    if (s.embedding.size() != dim || dim == 0) {
      throw Error(ErrorCode::invalid_argument, "speaker embeddings must share a positive dimension");
    }
    double norm = 0.0;
    for (double v : s.embedding) norm += v * v;
    if (std::abs(std::sqrt(norm) - 1.0) > 1e-6) {
      throw Error(ErrorCode::invalid_argument, "speaker embedding is not unit norm");
    }
  }

  // Active clusters are identified by their smallest member index, which is
  // also the order used to break distance ties.
  std::vector<std::size_t> owner(n);
  std::vector<std::size_t> size(n, 1);
  std::vector<bool> active(n, true);
  Matrix dist(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    owner[i] = i;
    for (std::size_t j = i + 1; j < n; ++j) {
      dist(i, j) = dist(j, i) = cosine_distance(segments[i].embedding, segments[j].embedding);
    }
  }
  for (;;) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = n, bj = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      for (std::size_t j = i + 1; j < n; ++j) {
        if (active[j] && dist(i, j) < best) {
          best = dist(i, j);
          bi = i;
          bj = j;
        }
      }
    }
    if (bi == n || !(best < stop_distance)) break;
    // Lance-Williams update for average linkage.
    for (std::size_t k = 0; k < n; ++k) {
      if (!active[k] || k == bi || k == bj) continue;
      const double d = (static_cast<double>(size[bi]) * dist(k, bi) + static_cast<double>(size[bj]) * dist(k, bj)) /
                       static_cast<double>(size[bi] + size[bj]);
      dist(k, bi) = dist(bi, k) = d;
    }
    size[bi] += size[bj];
    active[bj] = false;
    for (auto& o : owner) {
      if (o == bj) o = bi;
    }
  }
  std::map<std::size_t, int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    auto [it, inserted] = labels.emplace(owner[i], static_cast<int>(labels.size()));
    segments[i].label = it->second;
  }
  return segments;
}

double overlap_seconds(const SpeechSpan& a, const SpeechSpan& b) {
  return std::max(0.0, std::min(a.end_s, b.end_s) - std::max(a.start_s, b.start_s));
}

std::vector<Utterance> assign_speakers(std::vector<Utterance> utterances, std::span<const SpeakerSegment> segments) {
  for (const auto& s : segments) {
    if (!s.label) throw Error(ErrorCode::invalid_argument, "assign_speakers needs labeled segments");
  }
  for (auto& u : utterances) {
    double best = 0.0;
    int label = kUnknownSpeaker;
    for (const auto& s : segments) {
      const double ov = overlap_seconds(u.span, s.span);
      if (ov > best) {
        best = ov;
        label = *s.label;
      }
    }
    u.speaker = label;
  }
  return utterances;
}

std::string speaker_name(int label) {
  return label == kUnknownSpeaker ? "UNKNOWN" : "SPEAKER_" + std::to_string(label);
}

ContextState build_transcript_state(std::span<const Utterance> utterances, const Provenance& source) {
  for (std::size_t i = 1; i < utterances.size(); ++i) {
    if (utterances[i].span.start_s < utterances[i - 1].span.start_s) {
      throw Error(ErrorCode::invalid_argument, "utterances are not time-ordered at index " + std::to_string(i));
    }
  }
  ContextState state;
  auto stamped = [&](const SpeechSpan& span) {
    Provenance p = source;
    char buf[64];
    std::snprintf(buf, sizeof buf, "t=%.3f-%.3f", span.start_s, span.end_s);
    p.locator = buf;
    return p;
  };
  std::map<int, std::set<std::string>> speakers;  // label -> languages
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    const auto& u = utterances[i];
    const int label = u.speaker.value_or(kUnknownSpeaker);
    auto& langs = speakers[label];
    if (u.language) langs.insert(*u.language);
    char times[64];
    std::snprintf(times, sizeof times, "[%.2f-%.2f]", u.span.start_s, u.span.end_s);
    std::string text = speaker_name(label) + " " + times;
    if (u.language) text += " (" + *u.language + ")";
    text += ": " + u.text;
    state.observations.push_back({"utt" + std::to_string(i), text, 0.0, {stamped(u.span)}});
  }
  auto entity_id = [](int label) {
    return label == kUnknownSpeaker ? std::string("spk_unknown") : "spk" + std::to_string(label);
  };
  for (const auto& [label, langs] : speakers) {
    Entity e;
    e.id = entity_id(label);
    e.kind = EntityKind::speaker;
    e.text = speaker_name(label);
    e.confidence = 1.0;
    if (!langs.empty()) {
      std::string joined;
      for (const auto& l : langs) joined += (joined.empty() ? "" : ",") + l;
      e.attributes["lang"] = joined;
    }
    e.provenance = {source};
    state.entities.push_back(std::move(e));
  }
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    const int label = utterances[i].speaker.value_or(kUnknownSpeaker);
    state.relations.push_back({"sb" + std::to_string(i), RelationKind::spoken_by, "utt" + std::to_string(i),
                               entity_id(label), 0.0, {stamped(utterances[i].span)}});
  }
  for (std::size_t i = 1; i < utterances.size(); ++i) {
    state.relations.push_back({"fw" + std::to_string(i), RelationKind::follows, "utt" + std::to_string(i),
                               "utt" + std::to_string(i - 1), 0.0, {stamped(utterances[i].span)}});
  }
  rebuild_provenance_index(state);
  return state;
}

Waveform decode_wav(std::string_view b) {
  auto fail = [](const std::string& msg) { return Error(ErrorCode::parse, "wav: " + msg); };
  if (b.size() < 12 || b.substr(0, 4) != "RIFF" || b.substr(8, 4) != "WAVE") throw fail("missing RIFF/WAVE header");
  std::size_t pos = 12;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::string_view data;
  bool have_fmt = false, have_data = false;
  while (pos + 8 <= b.size()) {
    const auto id = b.substr(pos, 4);
    const std::uint32_t len = get_u32(b, pos + 4);
    const std::size_t body = pos + 8;
    if (body + len > b.size()) throw fail("truncated chunk");
    if (id == "fmt ") {
      if (len < 16) throw fail("short fmt chunk");
      format = get_u16(b, body);
      channels = get_u16(b, body + 2);
      rate = get_u32(b, body + 4);
      bits = get_u16(b, body + 14);
      have_fmt = true;
    } else if (id == "data") {
      data = b.substr(body, len);
      have_data = true;
    }
    pos = body + len + (len & 1);
  }
  if (!have_fmt || !have_data) throw fail("missing fmt or data chunk");
  if (format != 1 || bits != 16 || channels == 0 || rate == 0) throw fail("only PCM16 is supported");
  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  const std::size_t frames = data.size() / (2u * channels);
  w.samples.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      acc += static_cast<std::int16_t>(get_u16(data, 2 * (i * channels + c))) / 32768.0;
    }
    w.samples[i] = acc / channels;
  }
  return w;
}

std::string to_pcm16(std::span<const double> samples) {
  std::string out;
  out.reserve(samples.size() * 2);
  for (double s : samples) {
    const double c = std::clamp(s, -1.0, 1.0);
    const auto v = static_cast<std::int16_t>(std::lround(std::clamp(c * 32768.0, -32768.0, 32767.0)));
    put_u16(out, static_cast<std::uint16_t>(v));
  }
  return out;
}

std::string encode_wav(const Waveform& wave) {
  const std::string pcm = to_pcm16(wave.samples);
  std::string out = "RIFF";
  put_u32(out, static_cast<std::uint32_t>(36 + pcm.size()));
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(wave.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(wave.sample_rate * 2));
  put_u16(out, 2);
  put_u16(out, 16);
  out += "data";
  put_u32(out, static_cast<std::uint32_t>(pcm.size()));
  out += pcm;
  return out;
}

std::vector<Utterance> transcribe(const Waveform& wave, std::string_view content_hash, const AudioAdapters& adapters,
                                  const AudioPipelineConfig& cfg, std::optional<std::chrono::milliseconds> budget) {
  if (adapters.vad == nullptr || adapters.asr == nullptr) {
    throw Error(ErrorCode::unavailable, "audio pipeline needs vad and asr adapters");
  }
  const std::string pcm = to_pcm16(wave.samples);
  AdapterRequest vad_req{"vad-0", ToolKind::vad, "vad",
                         {{"content_hash", content_hash},
                          {"pcm16", encode_binary(pcm)},
                          {"sample_rate", wave.sample_rate},
                          {"frame_ms", cfg.vad_frame_ms}}};
  const auto vad_resp = adapters.vad->invoke(vad_req, budget);
  if (!vad_resp.ok) throw adapter_error(vad_resp, "vad");
  std::vector<double> probs;
  try {
    probs = vad_resp.result.at("probs").get<std::vector<double>>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::protocol, "vad reply lacks a numeric 'probs' array");
  }
  for (double p : probs) {
    if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::protocol, "vad probability outside [0,1]");
  }
  const auto spans = vad_spans(probs, cfg.vad_frame_ms / 1000.0, cfg.vad);
  if (spans.empty()) return {};

  std::vector<AdapterRequest> asr_reqs;
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto lo = std::min(wave.samples.size(), static_cast<std::size_t>(spans[i].start_s * wave.sample_rate));
    const auto hi = std::min(wave.samples.size(), static_cast<std::size_t>(spans[i].end_s * wave.sample_rate));
    const auto slice = std::span<const double>(wave.samples).subspan(lo, hi - lo);
    asr_reqs.push_back({"asr-" + std::to_string(i), ToolKind::asr, "transcribe",
                        {{"content_hash", content_hash},
                         {"index", i},
                         {"start", spans[i].start_s},
                         {"end", spans[i].end_s},
                         {"sample_rate", wave.sample_rate},
                         {"pcm16", encode_binary(to_pcm16(slice))}}});
  }
  const auto asr_resps = adapters.asr->invoke_batched(asr_reqs, budget);
  std::vector<Utterance> utterances;
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto& r = asr_resps[i];
    if (!r.ok) throw adapter_error(r, "asr span " + std::to_string(i));
    Utterance u;
    u.span = spans[i];
    u.text = r.result.value("text", std::string{});
    if (r.result.contains("language_posterior")) {
      double best = -1.0;
      for (const auto& [lang, p] : r.result["language_posterior"].items()) {
        if (p.get<double>() > best) {
          best = p.get<double>();
          u.language = lang;
        }
      }
    }
    utterances.push_back(std::move(u));
  }

  std::vector<SpeakerSegment> segments;
  if (adapters.embed != nullptr) {
    json span_list = json::array();
    for (const auto& s : spans) span_list.push_back({s.start_s, s.end_s});
    AdapterRequest embed_req{"embed-0", ToolKind::diarize_embed, "embed",
                             {{"content_hash", content_hash},
                              {"pcm16", encode_binary(pcm)},
                              {"sample_rate", wave.sample_rate},
                              {"spans", span_list}}};
    const auto er = adapters.embed->invoke(embed_req, budget);
    if (!er.ok) throw adapter_error(er, "diarize_embed");
    try {
      for (const auto& seg : er.result.at("segments")) {
        SpeakerSegment s;
        s.span = {seg.at("start").get<double>(), seg.at("end").get<double>()};
        s.embedding = seg.at("embedding").get<std::vector<double>>();
        double norm = 0.0;
        for (double v : s.embedding) norm += v * v;
        norm = std::sqrt(norm);
        if (norm <= 0.0) throw Error(ErrorCode::protocol, "zero speaker embedding");
        for (double& v : s.embedding) v /= norm;
        segments.push_back(std::move(s));
      }
    } catch (const json::exception&) {
      throw Error(ErrorCode::protocol, "diarize_embed reply lacks segments[{start,end,embedding}]");
    }
    segments = cluster_speakers(std::move(segments), cfg.cluster_stop_distance);
  } else {
    for (const auto& s : spans) segments.push_back({s, {1.0}, 0});
  }
  return assign_speakers(std::move(utterances), segments);
}

}  // namespace distill
