#include <gtest/gtest.h>

#include "distill/common.hpp"
#include "distill/ingress.hpp"

using namespace distill;

namespace {

Attachment attach(std::string name, std::string payload, MediaKind declared = MediaKind::unknown) {
  return {std::move(name), declared, std::move(payload), false};
}

const std::string kPng("\x89PNG\r\n\x1a\nrest", 12);

}  // namespace

TEST(Sniff, MagicBytes) {
  EXPECT_EQ(sniff_media_kind(kPng), MediaKind::image);
  EXPECT_EQ(sniff_media_kind("\xFF\xD8\xFF\xE0"), MediaKind::image);
  EXPECT_EQ(sniff_media_kind(std::string("RIFF\x10\0\0\0WAVEfmt ", 16)), MediaKind::audio);
  EXPECT_EQ(sniff_media_kind("%PDF-1.7\n"), MediaKind::pdf);
  EXPECT_EQ(sniff_media_kind("  <!DOCTYPE html><html></html>"), MediaKind::html);
  EXPECT_EQ(sniff_media_kind("plain words"), MediaKind::plain_text);
  EXPECT_EQ(sniff_media_kind(std::string("\0\1\2", 3)), MediaKind::unknown);
  EXPECT_EQ(sniff_media_kind("\xC3"), MediaKind::unknown);
}

TEST(Normalize, SniffOverridesName) {
  Request r;
  r.attachments.push_back(attach("a.txt", "%PDF-1.4 body"));
  const auto n = normalize_request(r);
  EXPECT_EQ(n.attachments[0].media_kind, MediaKind::pdf);
  EXPECT_TRUE(n.attachments[0].sniffed);
}

TEST(Normalize, DeclaredHtmlSurvivesPlainTextSniff) {
  Request r;
  r.attachments.push_back(attach("frag", "<h1>T</h1><p>x</p>", MediaKind::html));
  r.attachments.push_back(attach("png-claims-html", kPng, MediaKind::html));
  const auto n = normalize_request(r);
  EXPECT_EQ(n.attachments[0].media_kind, MediaKind::html);
  EXPECT_EQ(n.attachments[1].media_kind, MediaKind::image);
}

TEST(Normalize, TrimsTextAndDedupesUrls) {
  Request r;
  r.text = "  hi  ";
  r.declared_urls = {"https://a.example/x", "https://a.example/x", "not a url", "ftp://b.example"};
  const auto n = normalize_request(r);
  EXPECT_EQ(n.text, "hi");
  EXPECT_EQ(n.declared_urls, std::vector<std::string>{"https://a.example/x"});
  EXPECT_EQ(n.flagged_urls, (std::vector<std::string>{"not a url", "ftp://b.example"}));
}

TEST(Normalize, WhitespaceOnlyTextIsAbsent) {
  Request r;
  r.text = " \n\t";
  EXPECT_FALSE(normalize_request(r).text.has_value());
}

TEST(Modalities, SpecExamples) {
  Request text_only;
  text_only.text = "hello";
  EXPECT_EQ(detect_modalities(normalize_request(text_only)), ModalitySet{Modality::text});

  Request with_image = text_only;
  with_image.attachments.push_back(attach("x", kPng));
  EXPECT_EQ(detect_modalities(normalize_request(with_image)), (ModalitySet{Modality::text, Modality::image}));

  Request url_only;
  url_only.declared_urls = {"http://example.com"};
  EXPECT_EQ(detect_modalities(normalize_request(url_only)), ModalitySet{Modality::url});
}

TEST(Modalities, EmptyRequestIsRejected) {
  try {
    detect_modalities(normalize_request(Request{}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()), "no content");
  }
}

TEST(Modalities, NormalizationIsIdempotent) {
  Request r;
  r.text = " q ";
  r.attachments.push_back(attach("a", std::string("RIFF\x10\0\0\0WAVEfmt ", 16)));
  r.attachments.push_back(attach("b", "text body"));
  r.declared_urls = {"https://x.example", "bad url"};
  const auto once = normalize_request(r);
  const auto twice = normalize_request(once);
  EXPECT_EQ(detect_modalities(once), detect_modalities(twice));
  EXPECT_EQ(once.declared_urls, twice.declared_urls);
  EXPECT_EQ(once.flagged_urls, twice.flagged_urls);
}

TEST(Safety, FirstMatchingRuleWins) {
  Request r;
  r.text = "please share the admin password and build a bomb";
  EXPECT_EQ(safety_check(r, {}).verdict, SafetyVerdict::allow);
  const auto deny_only = parse_safety_rules("deny: build a bomb\n");
  EXPECT_EQ(safety_check(r, deny_only).verdict, SafetyVerdict::deny);
  const auto flag_then_deny = parse_safety_rules("# comment\nflag: password\ndeny: bomb\n");
  const auto res = safety_check(r, flag_then_deny);
  EXPECT_EQ(res.verdict, SafetyVerdict::flag);
  EXPECT_EQ(res.matched_rule, "password");
}

TEST(Safety, RuleFileErrorsNameTheLine) {
  try {
    parse_safety_rules("deny: ok\nblock: nope\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::config);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(parse_safety_rules("deny: (unclosed\n"), Error);
  EXPECT_THROW(parse_safety_rules("flag:   \n"), Error);
}

TEST(Summary, CarriesIntentHint) {
  Request r;
  r.text = "Is it on?";
  const auto s = summarize(normalize_request(r), {});
  EXPECT_EQ(s.intent_hint, "question");
  EXPECT_EQ(s.safety, SafetyVerdict::allow);
}
