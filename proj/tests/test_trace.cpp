#include "doctest.h"

#include <optional>
#include <string>
#include <vector>

#include "rebalance/error.hpp"
#include "rebalance/rng.hpp"
#include "rebalance/trace.hpp"

using namespace rebalance;
using namespace rebalance::trace;

namespace {

std::vector<TokenEvent> tokens_of(const std::vector<std::string>& texts, double p = 0.5) {
  std::vector<TokenEvent> out;
  for (std::size_t i = 0; i < texts.size(); ++i) out.push_back({i, texts[i], p});
  return out;
}

struct Span {
  std::size_t first, last;
  bool operator==(const Span&) const = default;
};

std::vector<Span> spans(const Segmentation& s) {
  std::vector<Span> out;
  for (const auto& x : s.steps) out.push_back({x.first_token, x.last_token});
  return out;
}

// Character-level reference over the concatenated text: a token that
// completes a delimiter match ends its step when the step holds a character
// before that match which no match covers.
std::vector<Span> reference_spans(const std::vector<std::string>& frags, const std::string& delim) {
  std::string text;
  std::vector<std::size_t> off{0};
  for (const auto& f : frags) {
    text += f;
    off.push_back(text.size());
  }
  std::vector<bool> covered(text.size(), false);
  std::vector<std::pair<std::size_t, std::size_t>> matches;
  for (auto p = text.find(delim); p != std::string::npos; p = text.find(delim, p + delim.size())) {
    matches.push_back({p, p + delim.size()});
    for (std::size_t c = p; c < p + delim.size(); ++c) covered[c] = true;
  }
  std::vector<Span> out;
  std::optional<std::size_t> open;
  for (std::size_t i = 0; i < frags.size(); ++i) {
    if (!open) open = i;
    bool close = false;
    for (const auto& [b, e] : matches) {
      if (e <= off[i] || e > off[i + 1]) continue;
      for (std::size_t c = off[*open]; c < b; ++c) close = close || !covered[c];
    }
    if (close) {
      out.push_back({*open, i});
      open.reset();
    }
  }
  if (open) out.push_back({*open, frags.size() - 1});
  return out;
}

}  // namespace

TEST_CASE("delimiter as a whole token") {
  const auto seg = segment_steps(tokens_of({"a", "\n\n", "b"}));
  CHECK(spans(seg) == std::vector<Span>{{0, 1}, {2, 2}});
  CHECK(seg.steps[0].step_index == 1);
  CHECK(seg.steps[1].step_index == 2);
  CHECK_FALSE(seg.think_end.has_value());
}

TEST_CASE("delimiter split across tokens") {
  const auto seg = segment_steps(tokens_of({"a\n", "\nb", "c"}));
  CHECK(spans(seg) == std::vector<Span>{{0, 1}, {2, 2}});
}

TEST_CASE("think-end marker stops segmentation") {
  const auto seg = segment_steps(tokens_of({"x", "</think>", "y"}));
  CHECK(spans(seg) == std::vector<Span>{{0, 1}});
  REQUIRE(seg.think_end.has_value());
  CHECK(*seg.think_end == 1);
}

TEST_CASE("marker split across tokens and marker-only final step") {
  auto seg = segment_steps(tokens_of({"a", "</th", "ink>", "z"}));
  CHECK(spans(seg) == std::vector<Span>{{0, 2}});
  CHECK(*seg.think_end == 2);

  seg = segment_steps(tokens_of({"a", "\n\n", "</think>"}));
  CHECK(spans(seg) == std::vector<Span>{{0, 1}, {2, 2}});
  CHECK(*seg.think_end == 2);
}

TEST_CASE("consecutive delimiters never produce empty steps") {
  const auto seg = segment_steps(tokens_of({"a", "\n\n", "\n\n", "b", "\n\n\n\n", "c"}));
  CHECK(spans(seg) == std::vector<Span>{{0, 1}, {2, 4}, {5, 5}});
  const auto lead = segment_steps(tokens_of({"\n\n", "a", "\n\n"}));
  CHECK(spans(lead) == std::vector<Span>{{0, 2}});
}

TEST_CASE("empty delimiter is a config error") {
  SegmentConfig cfg;
  cfg.delimiter = "";
  try {
    segment_steps(tokens_of({"a"}), cfg);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Config);
  }
}

TEST_CASE("segmentation matches a character-level reference under random fragmentation") {
  Rng rng(11);
  const char alphabet[] = {'a', 'b', '\n', '\n', ' '};
  for (int trial = 0; trial < 300; ++trial) {
    std::string text;
    const auto len = 5 + rng.below(60);
    for (std::uint64_t i = 0; i < len; ++i) text += alphabet[rng.below(sizeof alphabet)];
    // Random fragmentation.
    std::vector<std::string> frags;
    for (std::size_t pos = 0; pos < text.size();) {
      const auto n = std::min<std::size_t>(1 + rng.below(4), text.size() - pos);
      frags.push_back(text.substr(pos, n));
      pos += n;
    }
    const auto seg = segment_steps(tokens_of(frags));
    CHECK(spans(seg) == reference_spans(frags, "\n\n"));
    // Coverage and disjointness.
    if (!seg.steps.empty()) {
      CHECK(seg.steps.front().first_token == 0);
      CHECK(seg.steps.back().last_token == frags.size() - 1);
      for (std::size_t i = 1; i < seg.steps.size(); ++i) {
        CHECK(seg.steps[i].first_token == seg.steps[i - 1].last_token + 1);
      }
    }
  }
}

TEST_CASE("pattern scanner keeps a bounded tail") {
  PatternScanner sc("abcab");
  std::size_t hits = 0;
  for (int i = 0; i < 1000; ++i) {
    hits += sc.push("xabcabcab").size();
    CHECK(sc.retained() <= 4);
  }
  CHECK(hits == 1000);  // "abcab" once per fragment, leftmost non-overlapping
  PatternScanner split("\n\n");
  CHECK(split.push("a\n").empty());
  const auto m = split.push("\nb");
  REQUIRE(m.size() == 1);
  CHECK(m[0].begin == 1);
  CHECK(m[0].end == 3);
}

TEST_CASE("probability clamping") {
  CHECK(clamp_probability(0.0) == kMinProbability);
  CHECK(clamp_probability(1.0) == 1.0);
  CHECK(clamp_probability(0.3) == 0.3);
  CHECK_THROWS_AS(clamp_probability(1.5), Error);
  CHECK_THROWS_AS(clamp_probability(-0.1), Error);
  CHECK_THROWS_AS(clamp_probability(std::nan("")), Error);
}

namespace {
Trace sample_trace() {
  Trace t;
  t.trace_id = "t-1";
  t.meta = {{"model", "tiny"}, {"dataset", "unit"}};
  t.tokens = tokens_of({"Let", " x", "\n\n", "so", " 0.1+0.2", "\n\n", "done", "</think>", "42"});
  t.tokens[1].p_max = 0.123456789012345;
  t.tokens[4].p_max = 1e-12;
  const auto seg = segment_steps(t.tokens);
  t.steps = seg.steps;
  t.think_end = seg.think_end;
  t.steps[0].hidden[3] = {0.1, -2.5, 1e-300};
  t.steps[1].hidden[3] = {0.2, 0.30000000000000004, 7.0};
  t.steps[1].hidden[5] = {1.0};
  t.answer_labels = {{1, "A", false}, {3, "B", true}};
  return t;
}
}  // namespace

TEST_CASE("trace round trip is byte identical") {
  const Trace t = sample_trace();
  const std::string bytes = write_trace(t);
  const Trace back = read_trace(bytes);
  CHECK(back == t);
  CHECK(write_trace(back) == bytes);
  CHECK(back.steps.size() == 3);
  CHECK(*back.think_end == 7);
}

TEST_CASE("corpus of several traces") {
  Trace a = sample_trace();
  Trace b = sample_trace();
  b.trace_id = "t-2";
  const auto corpus = read_corpus(write_trace(a) + write_trace(b));
  REQUIRE(corpus.size() == 2);
  CHECK(corpus[1].trace_id == "t-2");
}

TEST_CASE("trace without hidden vectors") {
  const std::string bytes =
      "{\"kind\":\"header\",\"trace_id\":\"h\",\"meta\":{}}\n"
      "{\"kind\":\"token\",\"i\":0,\"text\":\"a\",\"p_max\":0.5}\n"
      "{\"kind\":\"token\",\"i\":1,\"text\":\"\\n\\n\",\"p_max\":0.25}\n"
      "{\"kind\":\"end\",\"think_end\":null}\n";
  const Trace t = read_trace(bytes);
  CHECK(t.steps.size() == 1);
  CHECK(t.steps[0].hidden.empty());
  CHECK(write_trace(t) == bytes);
}

TEST_CASE("malformed trace input") {
  const std::string head = "{\"kind\":\"header\",\"trace_id\":\"h\",\"meta\":{}}\n";
  auto expect_error = [](const std::string& bytes, const std::string& code,
                         const std::string& needle) {
    try {
      read_trace(bytes);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == code);
      INFO(std::string(e.what()));
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };
  expect_error(head + "{\"kind\":\"token\",\"i\":0,\"text\":\"a\",\"p_max\":1.5}\n{\"kind\":\"end\"}\n",
               "parse", "line 2");
  expect_error(head + "not json\n", "parse", "line 2");
  expect_error(head +
                   "{\"kind\":\"token\",\"i\":0,\"text\":\"a\",\"p_max\":0.5}\n"
                   "{\"kind\":\"token\",\"i\":1,\"text\":\"\\n\\n\",\"p_max\":0.5}\n"
                   "{\"kind\":\"token\",\"i\":2,\"text\":\"b\",\"p_max\":0.5}\n"
                   "{\"kind\":\"hidden\",\"step\":1,\"layer\":0,\"vec\":[1,2]}\n"
                   "{\"kind\":\"hidden\",\"step\":2,\"layer\":0,\"vec\":[1,2,3]}\n"
                   "{\"kind\":\"end\",\"think_end\":null}\n",
               "schema", "dimension");
  expect_error(head +
                   "{\"kind\":\"token\",\"i\":0,\"text\":\"a\",\"p_max\":0.5}\n"
                   "{\"kind\":\"token\",\"i\":2,\"text\":\"b\",\"p_max\":0.5}\n",
               "parse", "line 3");
  expect_error(head + "{\"kind\":\"token\",\"i\":0,\"text\":\"a\",\"p_max\":0.5}\n",
               "parse", "no end record");
  expect_error(head +
                   "{\"kind\":\"token\",\"i\":0,\"text\":\"a</think>\",\"p_max\":0.5}\n"
                   "{\"kind\":\"end\",\"think_end\":null}\n",
               "schema", "think_end");
}

TEST_CASE("think text and meta overrides") {
  Trace t;
  t.meta["delimiter"] = "##";
  t.meta["think_end_marker"] = "END";
  t.tokens = tokens_of({"a b", "##", "c", "END", "tail"});
  const auto cfg = segment_config_from_meta(t.meta);
  const auto seg = segment_steps(t.tokens, cfg);
  CHECK(spans(seg) == std::vector<Span>{{0, 1}, {2, 3}});
  t.steps = seg.steps;
  t.think_end = seg.think_end;
  CHECK(think_text(t) == "a b##c");
}
