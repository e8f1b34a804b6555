#include "rebalance/controller.hpp"

#include <cmath>

#include "rebalance/error.hpp"

namespace rebalance::control {

namespace {
std::shared_ptr<const SessionConfig> validated(std::shared_ptr<const SessionConfig> cfg) {
  if (!cfg) throw config_error("missing session config");
  if (cfg->window.size < 1) throw config_error("window size must be >= 1");
  if (cfg->segment.delimiter.empty()) throw config_error("step delimiter must be non-empty");
  if (cfg->actuator == surface::Actuator::HiddenAdditive) {
    if (!cfg->steering || cfg->steering->v.empty()) {
      throw config_error("hidden_additive actuator requires a steering vector");
    }
    if (cfg->declared_width && *cfg->declared_width != cfg->steering->v.size()) {
      throw data_error("dimension", "steering vector has dimension " +
                                        std::to_string(cfg->steering->v.size()) +
                                        " but the layer width is " +
                                        std::to_string(*cfg->declared_width));
    }
  }
  return cfg;
}
}  // namespace

Session::Session(std::shared_ptr<const SessionConfig> cfg)
    : cfg_(validated(std::move(cfg))), segmenter_(cfg_->segment) {}

Session open_session(const SessionConfig& cfg) {
  return Session(std::make_shared<const SessionConfig>(cfg));
}

ClosedStep Session::close_step() {
  const double c = std::exp(log_sum_ / static_cast<double>(step_tokens_));
  window_.push_back(c);
  if (window_.size() > cfg_->window.size) window_.pop_front();
  const std::vector<double> win(window_.begin(), window_.end());
  ClosedStep closed{step_, c, stats::window_variance(win)};
  last_closed_ = closed;
  log_sum_ = 0.0;
  step_tokens_ = 0;
  return closed;
}

Session::Advance Session::advance(const trace::TokenEvent& ev) {
  if (phase_ == Phase::Done) throw protocol_error("sequencing", "token after the session finished");
  if (last_index_ && ev.index <= *last_index_) {
    throw protocol_error("sequencing", "token index " + std::to_string(ev.index) +
                                           " does not follow " + std::to_string(*last_index_));
  }
  const double p = trace::clamp_probability(ev.p_max);
  last_index_ = ev.index;

  const auto out = segmenter_.push(ev.text);
  ++tokens_seen_;
  if (out.opens_step) ++steps_seen_;
  log_sum_ += std::log(p);
  ++step_tokens_;

  Advance adv;
  if (out.closes_step) adv.closed = close_step();
  if (out.think_ended) {
    phase_ = Phase::Done;
    adv.ended = true;
  } else if (out.closes_step) {
    ++step_;
  }
  return adv;
}

std::optional<SteeringDirective> Session::feed(const trace::TokenEvent& ev) {
  if (cfg_->actuator != surface::Actuator::HiddenAdditive) {
    throw protocol_error("config", "session uses the dynamic_temperature actuator");
  }
  const auto adv = advance(ev);
  if (!adv.closed || adv.ended) return std::nullopt;
  const auto w = surface::evaluate(adv.closed->confidence, adv.closed->variance, cfg_->surface);
  return SteeringDirective{step_, w.alpha, w.lambda, w.delta, cfg_->steering->layer};
}

std::optional<TemperatureDirective> Session::drive_temperature(const trace::TokenEvent& ev) {
  if (cfg_->actuator != surface::Actuator::DynamicTemperature) {
    throw protocol_error("config", "session uses the hidden_additive actuator");
  }
  const auto adv = advance(ev);
  if (!adv.closed || adv.ended) return std::nullopt;
  return TemperatureDirective{
      step_, surface::temperature_for(adv.closed->confidence, adv.closed->variance,
                                      cfg_->surface)};
}

std::optional<ClosedStep> Session::finish() {
  if (phase_ == Phase::Done) return std::nullopt;
  phase_ = Phase::Done;
  if (step_tokens_ == 0) return std::nullopt;
  return close_step();
}

std::vector<ReplayRow> replay(const trace::Trace& t, const surface::ControlSurface& cs,
                              stats::WindowConfig window, std::size_t lag) {
  const auto conf = stats::trace_confidences(t);
  std::vector<ReplayRow> rows(conf.size());
  if (conf.empty()) return rows;
  const auto var = stats::windowed_variance(conf, window);
  for (std::size_t i = 0; i < conf.size(); ++i) {
    rows[i].step = i + 1;
    rows[i].confidence = conf[i];
    rows[i].variance = var[i];
    if (i >= lag) rows[i].alpha = surface::evaluate(conf[i - lag], var[i - lag], cs).alpha;
  }
  return rows;
}

}  // namespace rebalance::control
