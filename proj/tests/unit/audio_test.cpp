#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "distill/adapters.hpp"
#include "distill/audio.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace distill;
using nlohmann::json;

namespace {

std::vector<double> sine(double hz, double amplitude, double seconds, int sr) {
  std::vector<double> s(static_cast<std::size_t>(seconds * sr));
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = amplitude * std::sin(2 * M_PI * hz * static_cast<double>(i) / sr);
  return s;
}

std::size_t argmax_column(const Matrix& z, std::size_t t) {
  std::size_t best = 0;
  for (std::size_t f = 1; f < z.rows; ++f) {
    if (z(f, t) > z(best, t)) best = f;
  }
  return best;
}

std::vector<double> unit(std::vector<double> v) {
  const double n = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
  for (auto& x : v) x /= n;
  return v;
}

/// Recomputes every cluster distance from scratch at each step and merges
/// the closest pair; returns the partition as sorted index sets.
std::set<std::set<std::size_t>> brute_force_clusters(const std::vector<std::vector<double>>& emb, double stop) {
  std::vector<std::set<std::size_t>> clusters;
  for (std::size_t i = 0; i < emb.size(); ++i) clusters.push_back({i});
  auto dist = [&](const std::set<std::size_t>& a, const std::set<std::size_t>& b) {
    double sum = 0;
    for (auto i : a) {
      for (auto j : b) {
        double dot = 0;
        for (std::size_t k = 0; k < emb[i].size(); ++k) dot += emb[i][k] * emb[j][k];
        sum += 1.0 - dot;
      }
    }
    return sum / static_cast<double>(a.size() * b.size());
  };
  for (;;) {
    double best = stop;
    std::pair<std::size_t, std::size_t> pick{0, 0};
    bool found = false;
    for (std::size_t i = 0; i < clusters.size(); ++i) {
      for (std::size_t j = i + 1; j < clusters.size(); ++j) {
        const double d = dist(clusters[i], clusters[j]);
        if (d < best) {
          best = d;
          pick = {i, j};
          found = true;
        }
      }
    }
    if (!found) break;
    clusters[pick.first].insert(clusters[pick.second].begin(), clusters[pick.second].end());
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(pick.second));
  }
  return {clusters.begin(), clusters.end()};
}

}  // namespace

TEST(Vad, MergeExample) {
  const std::vector<double> p{0.9, 0.9, 0.2, 0.9};
  const auto spans = vad_spans(p, 0.01, {0.5, 1, 1});
  ASSERT_EQ(spans.size(), 1u);
  EXPECT_DOUBLE_EQ(spans[0].start_s, 0.0);
  EXPECT_DOUBLE_EQ(spans[0].end_s, 0.04);
}

TEST(Vad, NothingAboveThreshold) {
  const std::vector<double> p{0.1, 0.49, 0.3};
  EXPECT_TRUE(vad_spans(p, 0.01, {0.5, 1, 1}).empty());
}

TEST(Vad, ThresholdIsInclusive) {
  const std::vector<double> p{0.5};
  EXPECT_EQ(vad_frame_runs(p, {0.5, 0, 1}).size(), 1u);
}

TEST(Vad, MatchesFrameEnumerationOracle) {
  support::Rng rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> len(0, 60), small(0, 5);
  for (int c = 0; c < 300; ++c) {
    std::vector<double> p(len(rng));
    for (auto& x : p) x = u(rng);
    const VadParams params{u(rng), small(rng), small(rng) + 1};
    EXPECT_EQ(vad_frame_runs(p, params), oracle::vad_runs(p, params.threshold, params.merge_gap_frames,
                                                           params.min_len_frames));
    const auto spans = vad_spans(p, 0.01, params);
    for (std::size_t i = 0; i < spans.size(); ++i) {
      EXPECT_LT(spans[i].start_s, spans[i].end_s);
      EXPECT_LE(spans[i].end_s, static_cast<double>(p.size()) * 0.01 + 1e-12);
      if (i > 0) EXPECT_LT(spans[i - 1].end_s, spans[i].start_s);
    }
  }
}

TEST(Speakers, MaxOverlapExample) {
  std::vector<SpeakerSegment> segs{{{0.0, 1.6}, {1.0}, 0}, {{1.6, 3.0}, {1.0}, 1}};
  std::vector<Utterance> utts{{{1.0, 2.0}, "x", {}, {}}, {{2.0, 2.5}, "y", {}, {}}, {{5.0, 6.0}, "z", {}, {}}};
  const auto out = assign_speakers(utts, segs);
  EXPECT_EQ(out[0].speaker, 0);
  EXPECT_EQ(out[1].speaker, 1);
  EXPECT_EQ(out[2].speaker, kUnknownSpeaker);
}

TEST(Speakers, TieGoesToEarlierSegment) {
  std::vector<SpeakerSegment> segs{{{0.0, 1.5}, {1.0}, 3}, {{1.5, 3.0}, {1.0}, 4}};
  std::vector<Utterance> utts{{{1.0, 2.0}, "x", {}, {}}};
  EXPECT_EQ(assign_speakers(utts, segs)[0].speaker, 3);
}

TEST(Speakers, MatchesOverlapTableOracle) {
  support::Rng rng(5);
  std::uniform_int_distribution<int> tick(0, 40), count(0, 6), lab(0, 3);
  for (int c = 0; c < 200; ++c) {
    std::vector<SpeakerSegment> segs;
    std::vector<SpeechSpan> seg_spans;
    std::vector<int> labels;
    for (int i = count(rng); i > 0; --i) {
      int a = tick(rng), b = tick(rng);
      if (a == b) ++b;
      SpeechSpan s{std::min(a, b) * 0.25, std::max(a, b) * 0.25};
      segs.push_back({s, {1.0}, lab(rng)});
      seg_spans.push_back(s);
      labels.push_back(*segs.back().label);
    }
    std::vector<Utterance> utts;
    std::vector<SpeechSpan> utt_spans;
    for (int i = count(rng) + 1; i > 0; --i) {
      int a = tick(rng), b = tick(rng);
      if (a == b) ++b;
      utts.push_back({{std::min(a, b) * 0.25, std::max(a, b) * 0.25}, "u", {}, {}});
      utt_spans.push_back(utts.back().span);
    }
    const auto out = assign_speakers(utts, segs);
    const auto expected = oracle::speaker_table(utt_spans, seg_spans, labels);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i].speaker.value(), expected[i]);
  }
}

TEST(Clustering, Examples) {
  const auto e = unit({1, 2, 3});
  auto same = cluster_speakers({{{0, 1}, e, {}}, {{1, 2}, e, {}}}, 0.3);
  EXPECT_EQ(same[0].label, 0);
  EXPECT_EQ(same[1].label, 0);
  auto apart = cluster_speakers({{{0, 1}, {1, 0}, {}}, {{1, 2}, {0, 1}, {}}}, 0.3);
  EXPECT_EQ(apart[0].label, 0);
  EXPECT_EQ(apart[1].label, 1);
  EXPECT_THROW(cluster_speakers({{{0, 1}, {2, 0}, {}}}, 0.3), Error);
  EXPECT_THROW(cluster_speakers({{{0, 1}, {1, 0}, {}}, {{0, 1}, {1, 0, 0}, {}}}, 0.3), Error);
}

TEST(Clustering, MatchesBruteForceMergeOrder) {
  support::Rng rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> count(1, 6);
  std::uniform_real_distribution<double> stop(0.1, 1.2);
  for (int c = 0; c < 300; ++c) {
    std::vector<SpeakerSegment> segs;
    std::vector<std::vector<double>> emb;
    for (std::size_t i = count(rng); i > 0; --i) {
      emb.push_back(unit({n(rng), n(rng), n(rng)}));
      segs.push_back({{0, 1}, emb.back(), {}});
    }
    const double theta = stop(rng);
    const auto out = cluster_speakers(segs, theta);
    std::map<int, std::set<std::size_t>> by_label;
    int next = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      ASSERT_TRUE(out[i].label);
      // Labels are dense in order of first appearance.
      if (!by_label.contains(*out[i].label)) EXPECT_EQ(*out[i].label, next++);
      by_label[*out[i].label].insert(i);
    }
    std::set<std::set<std::size_t>> partition;
    for (auto& [_, members] : by_label) partition.insert(members);
    EXPECT_EQ(partition, brute_force_clusters(emb, theta));
  }
}

TEST(TranscriptState, Counts) {
  const auto src = support::provenance("audio:x");
  EXPECT_EQ(build_transcript_state({}, src), ContextState{});

  std::vector<Utterance> two{{{0, 1}, "hi", {}, 0}, {{1, 2}, "there", {}, 0}};
  auto s = build_transcript_state(two, src);
  EXPECT_EQ(s.observations.size(), 2u);
  EXPECT_EQ(s.entities.size(), 1u);
  auto count_kind = [](const ContextState& st, RelationKind kind) {
    return std::count_if(st.relations.begin(), st.relations.end(), [&](const Relation& r) { return r.kind == kind; });
  };
  EXPECT_EQ(count_kind(s, RelationKind::spoken_by), 2);
  EXPECT_EQ(count_kind(s, RelationKind::follows), 1);

  std::vector<Utterance> three{{{0, 1}, "a", {}, 0}, {{1, 2}, "b", {}, 1}, {{2, 3}, "c", {}, 0}};
  s = build_transcript_state(three, src);
  EXPECT_EQ(s.observations.size(), 3u);
  EXPECT_EQ(s.entities.size(), 2u);
  EXPECT_EQ(count_kind(s, RelationKind::spoken_by), 3);
  EXPECT_EQ(count_kind(s, RelationKind::follows), 2);
  EXPECT_NO_THROW(validate_state(s));

  std::vector<Utterance> unordered{{{2, 3}, "a", {}, 0}, {{0, 1}, "b", {}, 0}};
  EXPECT_THROW(build_transcript_state(unordered, src), Error);
}

TEST(LogMel, SilenceIsLogEpsilon) {
  const auto cfg = make_mel_config();
  const auto mel = log_mel({std::vector<double>(16000, 0.0), 16000}, cfg);
  ASSERT_GT(mel.z.cols, 0u);
  for (double v : mel.z.data) EXPECT_EQ(v, std::log(cfg.epsilon));
}

TEST(LogMel, FilterbankRowsAreNonEmpty) {
  const auto cfg = make_mel_config();
  ASSERT_EQ(cfg.filterbank.rows, 80u);
  ASSERT_EQ(cfg.filterbank.cols, 257u);
  for (std::size_t f = 0; f < cfg.filterbank.rows; ++f) {
    double sum = 0;
    for (std::size_t k = 0; k < cfg.filterbank.cols; ++k) {
      EXPECT_GE(cfg.filterbank(f, k), 0.0);
      sum += cfg.filterbank(f, k);
    }
    EXPECT_GT(sum, 0.0) << f;
  }
  EXPECT_NEAR(mel_to_hz(hz_to_mel(1234.5)), 1234.5, 1e-9);
  EXPECT_NEAR(hz_to_mel(700.0), 2595.0 * std::log10(2.0), 1e-12);
}

TEST(LogMel, MatchesDftOracleFrame) {
  const auto cfg = make_mel_config();
  support::Rng rng(2);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  std::vector<double> s(4000);
  for (auto& x : s) x = u(rng);
  const auto mel = log_mel({s, 16000}, cfg);
  for (std::size_t t : {std::size_t{0}, std::size_t{7}, mel.z.cols - 1}) {
    const auto expected = oracle::log_mel_frame(s, t * cfg.hop_length(), cfg);
    for (std::size_t f = 0; f < cfg.n_mels; ++f) EXPECT_NEAR(mel.z(f, t), expected[f], 1e-8);
    EXPECT_DOUBLE_EQ(mel.frame_times[t], static_cast<double>(t * cfg.hop_length()) / 16000);
  }
}

TEST(LogMel, SineAtFilterCenterPeaksThere) {
  const auto cfg = make_mel_config();
  for (std::size_t f : {20u, 40u, 60u, 75u}) {
    const double hz = mel_center_hz(cfg, f);
    const auto s = sine(hz, 0.5, 0.2, 16000);
    const auto mel = log_mel({s, 16000}, cfg);
    for (std::size_t t = 0; t < mel.z.cols; ++t) {
      const auto expected = oracle::log_mel_frame(s, t * cfg.hop_length(), cfg);
      const auto oracle_arg = static_cast<std::size_t>(std::max_element(expected.begin(), expected.end()) - expected.begin());
      EXPECT_EQ(argmax_column(mel.z, t), oracle_arg);
      EXPECT_EQ(argmax_column(mel.z, t), f) << "filter " << f << " frame " << t;
    }
  }
}

TEST(LogMel, DoublingAmplitudeAddsLogFour) {
  const auto cfg = make_mel_config();
  support::Rng rng(4);
  std::uniform_real_distribution<double> u(-0.4, 0.4);
  std::vector<double> s(16000);
  for (auto& x : s) x = u(rng);
  std::vector<double> s2(s);
  for (auto& x : s2) x *= 2;
  const auto a = log_mel({s, 16000}, cfg);
  const auto b = log_mel({s2, 16000}, cfg);
  std::size_t checked = 0;
  for (std::size_t i = 0; i < a.z.data.size(); ++i) {
    if (a.z.data[i] > std::log(cfg.epsilon) + 20) {
      EXPECT_NEAR(b.z.data[i] - a.z.data[i], std::log(4.0), 1e-6);
      ++checked;
    }
  }
  EXPECT_GT(checked, a.z.data.size() / 2);
}

TEST(LogMel, TooShortInputThrows) {
  EXPECT_THROW(log_mel({std::vector<double>(100, 0.0), 16000}, make_mel_config()), Error);
}

TEST(Wav, RoundTrip) {
  Waveform w{sine(440, 0.5, 0.05, 8000), 8000};
  const auto back = decode_wav(encode_wav(w));
  EXPECT_EQ(back.sample_rate, 8000);
  ASSERT_EQ(back.samples.size(), w.samples.size());
  for (std::size_t i = 0; i < w.samples.size(); ++i) EXPECT_NEAR(back.samples[i], w.samples[i], 1.0 / 32767);
  EXPECT_THROW(decode_wav("RIFF...."), Error);
}

TEST(Wav, FixtureBurstsDecode) {
  const auto w = decode_wav(support::read_file(support::fixtures_dir() / "media" / "meeting.wav"));
  EXPECT_EQ(w.sample_rate, 16000);
  EXPECT_NEAR(w.duration_s(), 3.0, 1e-9);
}

TEST(Transcribe, EndToEndWithMocks) {
  const auto w = decode_wav(support::read_file(support::fixtures_dir() / "media" / "meeting.wav"));
  AdapterDescriptor vd;
  vd.adapter_id = "vad";
  vd.tool = ToolKind::vad;
  AdapterClient vad(vd, std::make_unique<MockTransport>(reference_handler()));
  AdapterDescriptor ad;
  ad.adapter_id = "asr";
  ad.tool = ToolKind::asr;
  ad.batch_max = 1;
  AdapterClient asr(ad, std::make_unique<MockTransport>([](const AdapterRequest& r) -> json {
    return {{"text", "span " + std::to_string(r.payload.at("index").get<int>())},
            {"language_posterior", {{"en", 0.9}, {"fr", 0.1}}}};
  }));
  AudioPipelineConfig cfg;
  cfg.vad = {0.5, 10, 10};
  const auto utts = transcribe(w, "hash", {&vad, nullptr, &asr}, cfg);
  ASSERT_EQ(utts.size(), 2u);
  EXPECT_EQ(utts[0].text, "span 0");
  EXPECT_EQ(utts[0].language, "en");
  EXPECT_NEAR(utts[0].span.start_s, 0.30, 0.02);
  EXPECT_NEAR(utts[1].span.end_s, 2.40, 0.02);
  EXPECT_EQ(asr.transport_calls(), 2u);
}

TEST(Transcribe, AdapterFailurePropagatesCode) {
  Waveform w{std::vector<double>(1600, 0.3), 16000};
  AdapterDescriptor vd;
  vd.adapter_id = "vad";
  vd.tool = ToolKind::vad;
  AdapterClient vad(vd, std::make_unique<MockTransport>([](const AdapterRequest&) -> json {
    throw Error(ErrorCode::unavailable, "down");
  }));
  AdapterClient asr(vd, std::make_unique<MockTransport>(echo_handler()));
  try {
    transcribe(w, "h", {&vad, nullptr, &asr}, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::unavailable);
  }
}
