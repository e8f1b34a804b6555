#include "rebalance/trace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "rebalance/error.hpp"
#include "rebalance/json_util.hpp"

namespace rebalance::trace {

double clamp_probability(double p) {
  if (std::isnan(p) || p < 0.0 || p > 1.0) {
    throw data_error("domain", "p_max outside [0, 1]: " + std::to_string(p));
  }
  return std::max(p, kMinProbability);
}

SegmentConfig segment_config_from_meta(const std::map<std::string, std::string>& meta) {
  SegmentConfig cfg;
  if (auto it = meta.find("delimiter"); it != meta.end()) cfg.delimiter = it->second;
  if (auto it = meta.find("think_end_marker"); it != meta.end()) {
    cfg.think_end_marker = it->second;
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// PatternScanner

PatternScanner::PatternScanner(std::string pattern) : pattern_(std::move(pattern)) {
  if (pattern_.empty()) throw config_error("empty scan pattern");
}

std::vector<PatternScanner::Match> PatternScanner::push(std::string_view fragment) {
  std::string buffer = tail_;
  buffer.append(fragment);
  const std::size_t base = tail_begin_;
  const std::size_t len = pattern_.size();

  std::vector<Match> matches;
  std::size_t from = 0;
  for (std::size_t p = buffer.find(pattern_); p != std::string::npos;
       p = buffer.find(pattern_, from)) {
    matches.push_back({base + p, base + p + len});
    from = p + len;
  }
  position_ += fragment.size();

  std::size_t keep_from = from;
  if (buffer.size() > len - 1) keep_from = std::max(keep_from, buffer.size() - (len - 1));
  tail_ = buffer.substr(std::min(keep_from, buffer.size()));
  tail_begin_ = base + std::min(keep_from, buffer.size());
  return matches;
}

// ---------------------------------------------------------------------------
// StepSegmenter

namespace {
PatternScanner require_delimiter(const SegmentConfig& cfg) {
  if (cfg.delimiter.empty()) throw config_error("step delimiter must be non-empty");
  return PatternScanner(cfg.delimiter);
}
}  // namespace

StepSegmenter::StepSegmenter(const SegmentConfig& cfg)
    : delimiter_(require_delimiter(cfg)) {
  if (!cfg.think_end_marker.empty()) marker_.emplace(cfg.think_end_marker);
}

StepSegmenter::Outcome StepSegmenter::push(std::string_view fragment) {
  if (done_) throw protocol_error("sequencing", "token after think-end marker");
  Outcome out;
  if (!step_open_) {
    step_open_ = true;
    out.opens_step = true;
    step_start_ = delimiter_.position();
    matched_in_step_ = 0;
  }

  bool close = false;
  for (const auto& m : delimiter_.push(fragment)) {
    const std::size_t begin_in_step = std::max(m.begin, step_start_);
    const std::size_t content = begin_in_step - step_start_ - matched_in_step_;
    if (content > 0) close = true;
    matched_in_step_ += m.end - begin_in_step;
  }

  if (marker_ && !marker_->push(fragment).empty()) {
    out.think_ended = true;
    out.closes_step = true;
    done_ = true;
    step_open_ = false;
  } else if (close) {
    out.closes_step = true;
    step_open_ = false;
  }
  return out;
}

Segmentation segment_steps(std::span<const TokenEvent> tokens, const SegmentConfig& cfg) {
  StepSegmenter seg(cfg);
  Segmentation out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto r = seg.push(tokens[i].text);
    if (r.opens_step) {
      StepSpan span;
      span.step_index = out.steps.size() + 1;
      span.first_token = tokens[i].index;
      out.steps.push_back(std::move(span));
    }
    out.steps.back().last_token = tokens[i].index;
    if (r.think_ended) {
      out.think_end = tokens[i].index;
      break;
    }
  }
  return out;
}

std::vector<double> span_probabilities(const Trace& t, const StepSpan& span) {
  std::vector<double> out;
  out.reserve(span.token_count());
  for (std::size_t i = span.first_token; i <= span.last_token; ++i) {
    out.push_back(t.tokens.at(i).p_max);
  }
  return out;
}

std::string think_text(const Trace& t) {
  const std::size_t end = t.think_end.value_or(t.tokens.size());
  std::string text;
  for (std::size_t i = 0; i < end && i < t.tokens.size(); ++i) text += t.tokens[i].text;
  return text;
}

// ---------------------------------------------------------------------------
// NDJSON

namespace {

void append_line(std::string& out, const Json& rec) {
  out += rec.dump();
  out += '\n';
}

std::string at_line(std::size_t line_no) { return "line " + std::to_string(line_no); }

struct PendingHidden {
  std::size_t step;
  LayerId layer;
  std::vector<double> vec;
  std::size_t line;
};

/// Accumulates records of one trace until its end record.
class TraceBuilder {
 public:
  explicit TraceBuilder(std::size_t header_line) : header_line_(header_line) {}

  Trace& trace() { return t_; }

  void add_token(const Json& rec, std::size_t line) {
    const std::string where = at_line(line);
    TokenEvent ev;
    ev.index = json_util::index(rec, "i", where);
    ev.text = json_util::string(rec, "text", where);
    const double p = json_util::number(rec, "p_max", where);
    try {
      ev.p_max = clamp_probability(p);
    } catch (const Error& e) {
      throw data_error("parse", where + ": " + e.what());
    }
    if (ev.index != t_.tokens.size()) {
      throw data_error("parse", where + ": token index " + std::to_string(ev.index) +
                                    " out of sequence (expected " +
                                    std::to_string(t_.tokens.size()) + ")");
    }
    t_.tokens.push_back(std::move(ev));
  }

  void add_hidden(const Json& rec, std::size_t line) {
    const std::string where = at_line(line);
    PendingHidden h;
    h.step = json_util::index(rec, "step", where);
    h.layer = static_cast<LayerId>(json_util::integer(rec, "layer", where));
    const Json& vec = json_util::member(rec, "vec", where);
    if (!vec.is_array() || vec.empty()) {
      throw data_error("schema", where + ": 'vec' must be a non-empty array");
    }
    h.vec.reserve(vec.size());
    for (const auto& x : vec) {
      if (!x.is_number()) throw data_error("schema", where + ": non-numeric 'vec' entry");
      h.vec.push_back(x.get<double>());
    }
    h.line = line;
    hidden_.push_back(std::move(h));
  }

  void add_label(const Json& rec, std::size_t line) {
    const std::string where = at_line(line);
    AnswerLabel a;
    a.step = json_util::index(rec, "step", where);
    a.decision = json_util::string(rec, "decision", where);
    a.correct = json_util::boolean(rec, "correct", where);
    t_.answer_labels.push_back(std::move(a));
  }

  Trace finish(const Json& end_rec, std::size_t line) {
    const std::string where = at_line(line);
    std::optional<std::size_t> recorded_end;
    if (auto it = end_rec.find("think_end"); it != end_rec.end() && !it->is_null()) {
      recorded_end = json_util::index(end_rec, "think_end", where);
    }

    auto seg = segment_steps(t_.tokens, segment_config_from_meta(t_.meta));
    if (seg.think_end != recorded_end) {
      throw data_error("schema", where + ": think_end does not match the marker position");
    }
    t_.steps = std::move(seg.steps);
    t_.think_end = seg.think_end;

    std::map<LayerId, std::size_t> dims;
    for (auto& h : hidden_) {
      const std::string hw = at_line(h.line);
      if (h.step < 1 || h.step > t_.steps.size()) {
        throw data_error("schema", hw + ": hidden record for unknown step " +
                                       std::to_string(h.step));
      }
      auto [it, fresh] = dims.emplace(h.layer, h.vec.size());
      if (!fresh && it->second != h.vec.size()) {
        throw data_error("schema", hw + ": layer " + std::to_string(h.layer) +
                                       " dimension mismatch (" + std::to_string(h.vec.size()) +
                                       " vs " + std::to_string(it->second) + ")");
      }
      auto& slot = t_.steps[h.step - 1].hidden;
      if (!slot.emplace(h.layer, std::move(h.vec)).second) {
        throw data_error("schema", hw + ": duplicate hidden record");
      }
    }
    for (const auto& a : t_.answer_labels) {
      if (a.step < 1 || a.step > t_.steps.size()) {
        throw data_error("schema", where + ": answer label for unknown step " +
                                       std::to_string(a.step));
      }
    }
    std::stable_sort(t_.answer_labels.begin(), t_.answer_labels.end(),
                     [](const AnswerLabel& a, const AnswerLabel& b) { return a.step < b.step; });
    return std::move(t_);
  }

  std::size_t header_line() const { return header_line_; }

 private:
  Trace t_;
  std::vector<PendingHidden> hidden_;
  std::size_t header_line_;
};

}  // namespace

std::string write_trace(const Trace& t) {
  std::string out;
  Json meta = Json::object();
  for (const auto& [k, v] : t.meta) meta[k] = v;
  append_line(out, Json{{"kind", "header"}, {"trace_id", t.trace_id}, {"meta", meta}});
  for (const auto& tok : t.tokens) {
    append_line(out, Json{{"kind", "token"}, {"i", tok.index}, {"text", tok.text},
                          {"p_max", tok.p_max}});
  }
  for (const auto& step : t.steps) {
    for (const auto& [layer, vec] : step.hidden) {
      append_line(out, Json{{"kind", "hidden"}, {"step", step.step_index}, {"layer", layer},
                            {"vec", vec}});
    }
  }
  for (const auto& a : t.answer_labels) {
    append_line(out, Json{{"kind", "answer_label"}, {"step", a.step},
                          {"decision", a.decision}, {"correct", a.correct}});
  }
  Json end{{"kind", "end"}};
  end["think_end"] = t.think_end ? Json(*t.think_end) : Json(nullptr);
  append_line(out, end);
  return out;
}

std::vector<Trace> read_corpus(std::string_view bytes) {
  std::vector<Trace> traces;
  std::optional<TraceBuilder> open;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    std::size_t nl = bytes.find('\n', pos);
    std::string_view line = bytes.substr(pos, nl == std::string_view::npos ? nl : nl - pos);
    pos = nl == std::string_view::npos ? bytes.size() : nl + 1;
    ++line_no;
    if (line.empty()) continue;

    const std::string where = at_line(line_no);
    Json rec = json_util::parse(line, where);
    const std::string kind = json_util::string(rec, "kind", where);
    if (kind == "header") {
      if (open) throw data_error("parse", where + ": header inside an unterminated trace");
      open.emplace(line_no);
      open->trace().trace_id = json_util::string(rec, "trace_id", where);
      if (auto it = rec.find("meta"); it != rec.end()) {
        if (!it->is_object()) throw data_error("parse", where + ": 'meta' must be an object");
        for (auto m = it->begin(); m != it->end(); ++m) {
          if (!m->is_string()) throw data_error("parse", where + ": meta values must be strings");
          open->trace().meta[m.key()] = m->get<std::string>();
        }
      }
      continue;
    }
    if (!open) throw data_error("parse", where + ": record before header");
    if (kind == "token") {
      open->add_token(rec, line_no);
    } else if (kind == "hidden") {
      open->add_hidden(rec, line_no);
    } else if (kind == "answer_label") {
      open->add_label(rec, line_no);
    } else if (kind == "end") {
      traces.push_back(open->finish(rec, line_no));
      open.reset();
    } else {
      throw data_error("parse", where + ": unknown record kind '" + kind + "'");
    }
  }
  if (open) {
    throw data_error("parse", "line " + std::to_string(open->header_line()) +
                                  ": trace has no end record");
  }
  return traces;
}

Trace read_trace(std::string_view bytes) {
  auto traces = read_corpus(bytes);
  if (traces.size() != 1) {
    throw data_error("parse", "expected exactly one trace, found " +
                                  std::to_string(traces.size()));
  }
  return std::move(traces.front());
}

std::vector<Trace> read_corpus_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("io", "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return read_corpus(ss.str());
  } catch (const Error& e) {
    throw Error(e.kind(), e.code(), path + ": " + e.what());
  }
}

}  // namespace rebalance::trace
