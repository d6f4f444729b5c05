#include "distill/controller.hpp"

#include <algorithm>
#include <cstdio>
#include <future>
#include <regex>
#include <set>
#include <tuple>

namespace distill {

using nlohmann::json;
using SteadyClock = std::chrono::steady_clock;

std::string_view to_string(PrimitiveKind kind) {
  switch (kind) {
    case PrimitiveKind::query_index:
      return "query_index";
    case PrimitiveKind::fetch_parse:
      return "fetch_parse";
    case PrimitiveKind::run_perception:
      return "run_perception";
    case PrimitiveKind::run_sandbox:
      return "run_sandbox";
    case PrimitiveKind::call_llm:
      return "call_llm";
  }
  return "call_llm";
}

PrimitiveKind parse_primitive_kind(std::string_view text) {
  for (auto k : {PrimitiveKind::query_index, PrimitiveKind::fetch_parse, PrimitiveKind::run_perception,
                 PrimitiveKind::run_sandbox, PrimitiveKind::call_llm}) {
    if (to_string(k) == text) return k;
  }
  throw Error(ErrorCode::config, "unknown primitive '" + std::string(text) + "'");
}

Modality parse_modality(std::string_view text) {
  for (auto m : {Modality::text, Modality::image, Modality::audio, Modality::document, Modality::url}) {
    if (to_string(m) == text) return m;
  }
  throw Error(ErrorCode::config, "unknown modality '" + std::string(text) + "'");
}

void validate(const ToolChain& chain) {
  if (chain.chain_id.empty()) throw Error(ErrorCode::config, "tool chain without chain_id");
  if (chain.steps.empty() || chain.steps.back().kind != PrimitiveKind::call_llm) {
    throw Error(ErrorCode::config, "chain '" + chain.chain_id + "' must end with call_llm");
  }
  const auto llm_steps = std::count_if(chain.steps.begin(), chain.steps.end(),
                                       [](const Primitive& p) { return p.kind == PrimitiveKind::call_llm; });
  if (llm_steps != 1) throw Error(ErrorCode::config, "chain '" + chain.chain_id + "' has more than one call_llm");
  if (chain.tags.empty()) throw Error(ErrorCode::config, "chain '" + chain.chain_id + "' has no tags");
}

std::string predict_task_type(const IngressSummary& summary, std::string_view query,
                              const std::vector<TaskRule>& rules) {
  const std::string q(query);
  for (const auto& rule : rules) {
    if (rule.modality && summary.modalities.count(*rule.modality) == 0) continue;
    if (rule.query_pattern &&
        !std::regex_search(q, std::regex(*rule.query_pattern, std::regex::ECMAScript | std::regex::icase))) {
      continue;
    }
    return rule.task;
  }
  return "general";
}

std::vector<ToolChain> enumerate_chains(std::string_view task_type, const ModalitySet& modalities,
                                        const std::vector<ToolChain>& registry) {
  std::vector<ToolChain> out;
  for (const auto& chain : registry) {
    const bool covered = std::includes(modalities.begin(), modalities.end(), chain.required_modalities.begin(),
                                       chain.required_modalities.end());
    const bool tagged = std::any_of(chain.tags.begin(), chain.tags.end(),
                                    [&](const std::string& t) { return t == "*" || t == task_type; });
    if (covered && tagged) out.push_back(chain);
  }
  if (out.empty()) {
    throw Error(ErrorCode::no_feasible_chain, "no chain serves task '" + std::string(task_type) + "'");
  }
  return out;
}

Selection select_chain(const std::vector<ToolChain>& candidates, const std::map<std::string, ChainEstimate>& estimates,
                       double q_min) {
  std::vector<std::pair<const ToolChain*, const ChainEstimate*>> rows;
  for (const auto& c : candidates) {
    const auto it = estimates.find(c.chain_id);
    if (it == estimates.end()) throw Error(ErrorCode::config, "no estimate for chain '" + c.chain_id + "'");
    rows.emplace_back(&c, &it->second);
  }
  Selection sel;
  std::vector<std::pair<const ToolChain*, const ChainEstimate*>> feasible;
  std::copy_if(rows.begin(), rows.end(), std::back_inserter(feasible),
               [&](const auto& r) { return r.second->quality >= q_min; });
  if (!feasible.empty()) {
    std::sort(feasible.begin(), feasible.end(), [](const auto& a, const auto& b) {
      return std::tie(a.second->cost, a.second->latency_ms, a.first->chain_id) <
             std::tie(b.second->cost, b.second->latency_ms, b.first->chain_id);
    });
    for (const auto& r : feasible) sel.fallbacks.push_back(*r.first);
    return sel;
  }
  sel.degraded = true;
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    if (a.second->quality != b.second->quality) return a.second->quality > b.second->quality;
    return std::tie(a.second->cost, a.first->chain_id) < std::tie(b.second->cost, b.first->chain_id);
  });
  for (const auto& r : rows) sel.fallbacks.push_back(*r.first);
  return sel;
}

namespace {

std::string step_label(const Primitive& p) {
  if (p.params.is_object()) {
    if (p.params.contains("label")) return p.params["label"].get<std::string>();
    if (p.kind == PrimitiveKind::run_perception && p.params.contains("pipeline")) {
      return p.params["pipeline"].get<std::string>();
    }
  }
  switch (p.kind) {
    case PrimitiveKind::query_index:
      return "index";
    case PrimitiveKind::fetch_parse:
      return "fetch";
    case PrimitiveKind::run_perception:
      return "perception";
    case PrimitiveKind::run_sandbox:
      return "sandbox";
    case PrimitiveKind::call_llm:
      return "llm";
  }
  return "step";
}

struct StepOutcome {
  std::vector<Fragment> fragments;
  std::optional<ExecutionFailure> failure;
  std::chrono::microseconds duration{0};
};

template <typename F>
StepOutcome timed(F&& body) {
  StepOutcome out;
  const auto t0 = SteadyClock::now();
  try {
    out.fragments = body();
  } catch (const Error& e) {
    out.failure = ExecutionFailure{e.code(), e.what()};
  } catch (const std::exception& e) {
    out.failure = ExecutionFailure{ErrorCode::unavailable, e.what()};
  }
  out.duration = std::chrono::duration_cast<std::chrono::microseconds>(SteadyClock::now() - t0);
  return out;
}

}  // namespace

ExecutionResult execute_chain(const std::vector<ToolChain>& fallbacks, const ExecutionHooks& hooks,
                              std::chrono::milliseconds deadline) {
  if (fallbacks.empty()) throw Error(ErrorCode::invalid_argument, "empty fallback list");
  const auto deadline_at = SteadyClock::now() + deadline;
  auto remaining = [&] {
    return std::max(std::chrono::milliseconds(0),
                    std::chrono::duration_cast<std::chrono::milliseconds>(deadline_at - SteadyClock::now()));
  };
  ExecutionResult res;
  auto record = [&](const ToolChain& chain, std::size_t i, const StepOutcome& o) {
    const Primitive& p = chain.steps[i];
    res.trace.steps.push_back({chain.chain_id, i, p.kind, step_label(p), !o.failure,
                               o.failure ? std::string(to_string(o.failure->code)) : "OK",
                               o.failure ? o.failure->message : "", o.duration});
  };
  auto best_effort = [&](const std::vector<Fragment>& fragments) {
    try {
      return hooks.compile(fragments);
    } catch (const std::exception&) {
      return ContextState{};
    }
  };
  auto deadline_failure = [&](const std::vector<Fragment>& fragments) {
    res.answer.reset();
    res.state = best_effort(fragments);
    res.error = ExecutionFailure{ErrorCode::deadline,
                                 "deadline of " + std::to_string(deadline.count()) + " ms exceeded"};
    return res;
  };

  for (const auto& chain : fallbacks) {
    std::vector<Fragment> fragments;
    bool chain_ok = true;
    std::size_t i = 0;
    while (chain_ok && i < chain.steps.size()) {
      if (remaining().count() <= 0) return deadline_failure(fragments);
      const Primitive& step = chain.steps[i];
      if (step.kind == PrimitiveKind::call_llm) {
        ContextState state;
        std::string prompt;
        std::string answer;
        const auto o = timed([&] {
          state = hooks.compile(fragments);
          prompt = hooks.render(state);
          answer = hooks.call_llm(chain, step, prompt, remaining());
          return std::vector<Fragment>{};
        });
        record(chain, i, o);
        res.state = std::move(state);
        if (!o.failure) {
          res.answer = std::move(answer);
          res.prompt = std::move(prompt);
          res.chain_id = chain.chain_id;
          res.error.reset();
          return res;
        }
        chain_ok = false;
        break;
      }
      std::size_t end = i + 1;
      if (step.kind == PrimitiveKind::run_perception) {
        while (end < chain.steps.size() && chain.steps[end].kind == PrimitiveKind::run_perception) ++end;
      }
      const auto budget = remaining();
      std::vector<StepOutcome> outcomes;
      if (end - i == 1) {
        outcomes.push_back(timed([&] { return hooks.run_step(chain, i, step, budget); }));
      } else {
        std::vector<std::future<StepOutcome>> jobs;
        for (std::size_t k = i; k < end; ++k) {
          jobs.push_back(std::async(std::launch::async, [&, k] {
            return timed([&] { return hooks.run_step(chain, k, chain.steps[k], budget); });
          }));
        }
        for (auto& j : jobs) outcomes.push_back(j.get());
      }
      for (std::size_t k = 0; k < outcomes.size(); ++k) {
        record(chain, i + k, outcomes[k]);
        if (outcomes[k].failure) {
          chain_ok = false;
        } else {
          for (auto& f : outcomes[k].fragments) fragments.push_back(std::move(f));
        }
      }
      i = end;
    }
    if (remaining().count() <= 0) return deadline_failure(fragments);
  }
  res.answer.reset();
  res.error = ExecutionFailure{ErrorCode::chains_exhausted,
                               "all " + std::to_string(fallbacks.size()) + " fallback chains failed"};
  return res;
}

json trace_summary(const Trace& trace) {
  json out = json::array();
  for (const auto& s : trace.steps) {
    out.push_back({{"chain_id", s.chain_id},
                   {"step", s.step_index},
                   {"kind", to_string(s.kind)},
                   {"label", s.label},
                   {"outcome", s.outcome}});
  }
  return out;
}

std::string trace_log_lines(const Trace& trace, std::string_view request_id) {
  std::string out;
  for (const auto& s : trace.steps) {
    char ms[32];
    std::snprintf(ms, sizeof ms, "%.3f", static_cast<double>(s.duration.count()) / 1000.0);
    out += std::string(request_id) + " chain=" + s.chain_id + " step=" + std::to_string(s.step_index) +
           " kind=" + std::string(to_string(s.kind)) + " label=" + s.label + " outcome=" + s.outcome + " ms=" + ms;
    if (!s.message.empty()) out += " message=" + json(s.message).dump();
    out += "\n";
  }
  return out;
}

json to_json(const ToolChain& chain) {
  json steps = json::array();
  for (const auto& s : chain.steps) steps.push_back({{"kind", to_string(s.kind)}, {"params", s.params}});
  json mods = json::array();
  for (auto m : chain.required_modalities) mods.push_back(to_string(m));
  return {{"chain_id", chain.chain_id}, {"steps", steps}, {"required_modalities", mods}, {"tags", chain.tags}};
}

ToolChain tool_chain_from_json(const json& j) {
  try {
    ToolChain c;
    c.chain_id = j.at("chain_id").get<std::string>();
    for (const auto& s : j.at("steps")) {
      Primitive p;
      p.kind = parse_primitive_kind(s.at("kind").get<std::string>());
      if (s.contains("params")) p.params = s["params"];
      if (!p.params.is_object()) throw Error(ErrorCode::config, "step params must be an object");
      c.steps.push_back(std::move(p));
    }
    for (const auto& m : j.value("required_modalities", json::array())) {
      c.required_modalities.insert(parse_modality(m.get<std::string>()));
    }
    c.tags = j.value("tags", std::vector<std::string>{"*"});
    validate(c);
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config, std::string("malformed chain: ") + e.what());
  }
}

ChainEstimate chain_estimate_from_json(const json& j) {
  try {
    ChainEstimate e{j.at("chain_id").get<std::string>(), j.at("quality").get<double>(), j.at("cost").get<double>(),
                    j.value("latency_ms", 0.0)};
    if (!(e.quality >= 0.0 && e.quality <= 1.0)) throw Error(ErrorCode::config, "quality outside [0,1] for '" + e.chain_id + "'");
    if (e.cost < 0.0 || e.latency_ms < 0.0) throw Error(ErrorCode::config, "negative cost or latency for '" + e.chain_id + "'");
    return e;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config, std::string("malformed estimate: ") + e.what());
  }
}

TaskRule task_rule_from_json(const json& j) {
  try {
    TaskRule r;
    r.task = j.at("task").get<std::string>();
    if (j.contains("query")) {
      r.query_pattern = j["query"].get<std::string>();
      try {
        std::regex check(*r.query_pattern);
      } catch (const std::regex_error& e) {
        throw Error(ErrorCode::config, "bad task rule pattern '" + *r.query_pattern + "': " + e.what());
      }
    }
    if (j.contains("modality")) r.modality = parse_modality(j["modality"].get<std::string>());
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config, std::string("malformed task rule: ") + e.what());
  }
}

}  // namespace distill
