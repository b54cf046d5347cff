// SPDX-License-Identifier: Apache-2.0

#include "aligner/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace aligner {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw ConfigError("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("expected a number, got \"" + s + "\"");
  }
}

std::uint64_t parse_uint(const std::string& s) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("expected a non-negative integer, got \"" + s + "\"");
  }
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("expected true/false, got \"" + s + "\"");
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::vector<Field> build_schema() {
  std::vector<Field> f;
  auto add_u64 = [&](const std::string& key, auto getter) {
    f.push_back({key, [getter](const RunConfig& c) { return std::to_string(*getter(const_cast<RunConfig&>(c))); },
                 [getter](RunConfig& c, const std::string& v) {
                   *getter(c) = static_cast<std::remove_reference_t<decltype(*getter(c))>>(parse_uint(v));
                 }});
  };
  auto add_f64 = [&](const std::string& key, auto getter) {
    f.push_back({key, [getter](const RunConfig& c) { return fmt_double(*getter(const_cast<RunConfig&>(c))); },
                 [getter](RunConfig& c, const std::string& v) { *getter(c) = parse_double(v); }});
  };
  auto add_bool = [&](const std::string& key, auto getter) {
    f.push_back({key, [getter](const RunConfig& c) {
                   return *getter(const_cast<RunConfig&>(c)) ? std::string("true") : std::string("false");
                 },
                 [getter](RunConfig& c, const std::string& v) { *getter(c) = parse_bool(v); }});
  };
  auto add_str = [&](const std::string& key, auto getter) {
    f.push_back({key, [getter](const RunConfig& c) { return *getter(const_cast<RunConfig&>(c)); },
                 [getter](RunConfig& c, const std::string& v) { *getter(c) = v; }});
  };

  add_u64("seed", [](RunConfig& c) { return &c.seed; });

  add_u64("model.vocab_size", [](RunConfig& c) { return &c.model.vocab_size; });
  add_u64("model.d_model", [](RunConfig& c) { return &c.model.d_model; });
  add_u64("model.n_layers", [](RunConfig& c) { return &c.model.n_layers; });
  add_u64("model.n_heads", [](RunConfig& c) { return &c.model.n_heads; });
  add_u64("model.d_ff", [](RunConfig& c) { return &c.model.d_ff; });
  add_u64("model.max_seq_len", [](RunConfig& c) { return &c.model.max_seq_len; });

  add_str("trainer.algorithm", [](RunConfig& c) { return &c.trainer.algorithm; });
  add_u64("trainer.global_batch", [](RunConfig& c) { return &c.trainer.global_batch; });
  add_u64("trainer.micro_batch", [](RunConfig& c) { return &c.trainer.micro_batch; });
  add_u64("trainer.epochs", [](RunConfig& c) { return &c.trainer.epochs; });
  add_u64("trainer.steps_per_epoch", [](RunConfig& c) { return &c.trainer.steps_per_epoch; });
  f.push_back({"trainer.lr.kind",
               [](const RunConfig& c) {
                 return c.trainer.lr.kind == LrSchedule::Kind::kConstant ? std::string("constant")
                                                                         : std::string("cosine");
               },
               [](RunConfig& c, const std::string& v) {
                 if (v == "constant") {
                   c.trainer.lr.kind = LrSchedule::Kind::kConstant;
                 } else if (v == "cosine") {
                   c.trainer.lr.kind = LrSchedule::Kind::kCosine;
                 } else {
                   throw ConfigError("trainer.lr.kind must be constant or cosine");
                 }
               }});
  add_f64("trainer.lr.peak", [](RunConfig& c) { return &c.trainer.lr.peak; });
  add_f64("trainer.lr.min", [](RunConfig& c) { return &c.trainer.lr.min_lr; });
  add_u64("trainer.lr.warmup_steps", [](RunConfig& c) { return &c.trainer.lr.warmup_steps; });
  add_u64("trainer.lr.max_steps", [](RunConfig& c) { return &c.trainer.lr.max_steps; });
  add_u64("trainer.lr.decay_start", [](RunConfig& c) { return &c.trainer.lr.decay_start; });
  add_bool("trainer.lora", [](RunConfig& c) { return &c.trainer.lora; });
  add_u64("trainer.lora_rank", [](RunConfig& c) { return &c.trainer.lora_rank; });
  add_f64("trainer.lora_alpha", [](RunConfig& c) { return &c.trainer.lora_alpha; });
  add_f64("trainer.weight_decay", [](RunConfig& c) { return &c.trainer.weight_decay; });
  add_f64("trainer.dpo.beta", [](RunConfig& c) { return &c.trainer.dpo.beta; });
  f.push_back({"trainer.dpo.variant",
               [](const RunConfig& c) { return dpo_variant_name(c.trainer.dpo.variant); },
               [](RunConfig& c, const std::string& v) {
                 c.trainer.dpo.variant = dpo_variant_from_name(v);
               }});
  add_f64("trainer.dpo.cdpo_eps", [](RunConfig& c) { return &c.trainer.dpo.cdpo_eps; });
  add_u64("trainer.spin.iterations", [](RunConfig& c) { return &c.trainer.spin_iterations; });
  add_u64("trainer.spin.max_new", [](RunConfig& c) { return &c.trainer.spin_max_new; });
  add_f64("trainer.dataset_fraction", [](RunConfig& c) { return &c.trainer.dataset_fraction; });

  add_u64("layout.tp", [](RunConfig& c) { return &c.layout.tp; });
  add_u64("layout.pp", [](RunConfig& c) { return &c.layout.pp; });
  add_u64("layout.dp", [](RunConfig& c) { return &c.layout.dp; });
  add_u64("layout.node_count", [](RunConfig& c) { return &c.layout.node_count; });
  add_u64("layout.gpus_per_node", [](RunConfig& c) { return &c.layout.gpus_per_node; });

  add_f64("ppo.clip_eps", [](RunConfig& c) { return &c.ppo.clip_eps; });
  add_f64("ppo.value_clip", [](RunConfig& c) { return &c.ppo.value_clip; });
  add_f64("ppo.kl_penalty_coef", [](RunConfig& c) { return &c.ppo.kl_penalty_coef; });
  add_f64("ppo.gamma", [](RunConfig& c) { return &c.ppo.gamma; });
  add_f64("ppo.lam", [](RunConfig& c) { return &c.ppo.lam; });
  add_u64("ppo.rollout_gbs", [](RunConfig& c) { return &c.ppo.rollout_gbs; });
  add_u64("ppo.train_gbs", [](RunConfig& c) { return &c.ppo.train_gbs; });
  add_f64("ppo.lr", [](RunConfig& c) { return &c.ppo.lr; });
  add_u64("ppo.steps", [](RunConfig& c) { return &c.ppo_steps; });
  add_u64("ppo.prompts_per_step", [](RunConfig& c) { return &c.ppo_prompts_per_step; });
  add_u64("ppo.max_new", [](RunConfig& c) { return &c.ppo_max_new; });
  add_f64("ppo.temperature", [](RunConfig& c) { return &c.ppo_temperature; });
  add_u64("ppo.gen_workers", [](RunConfig& c) { return &c.ppo_gen_workers; });
  add_f64("ppo.actor_lr", [](RunConfig& c) { return &c.ppo_actor_lr; });
  add_f64("ppo.critic_lr", [](RunConfig& c) { return &c.ppo_critic_lr; });
  add_bool("ppo.scripted_reward", [](RunConfig& c) { return &c.ppo_scripted_reward; });
  f.push_back({"ppo.scripted_target",
               [](const RunConfig& c) { return std::to_string(c.ppo_scripted_target); },
               [](RunConfig& c, const std::string& v) {
                 c.ppo_scripted_target = static_cast<std::int32_t>(parse_uint(v));
               }});
  add_f64("ppo.debug_train_delay_s", [](RunConfig& c) { return &c.ppo_debug_train_delay_s; });
  add_f64("ppo.debug_extra_rollout_s", [](RunConfig& c) { return &c.ppo_debug_extra_rollout_s; });
  add_f64("ppo.simulated_token_latency",
          [](RunConfig& c) { return &c.ppo_simulated_token_latency; });

  add_str("runtime.critic_host", [](RunConfig& c) { return &c.critic_host; });
  add_u64("runtime.max_frame", [](RunConfig& c) { return &c.max_frame; });
  f.push_back({"runtime.critic_port",
               [](const RunConfig& c) { return std::to_string(c.critic_port); },
               [](RunConfig& c, const std::string& v) {
                 c.critic_port = static_cast<std::uint16_t>(parse_uint(v));
               }});

  add_str("paths.data", [](RunConfig& c) { return &c.data_path; });
  add_str("paths.prompts", [](RunConfig& c) { return &c.prompts_path; });
  add_str("paths.out_dir", [](RunConfig& c) { return &c.out_dir; });
  add_str("paths.init_checkpoint", [](RunConfig& c) { return &c.init_checkpoint; });
  add_str("paths.reference_checkpoint", [](RunConfig& c) { return &c.reference_checkpoint; });
  return f;
}

const std::vector<Field>& schema() {
  static const std::vector<Field> fields = build_schema();
  return fields;
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  RunConfig config;
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    bool found = false;
    for (const auto& field : schema()) {
      if (field.key != key) continue;
      try {
        field.set(config, value);
      } catch (const std::exception& e) {
        throw ConfigError("config line " + std::to_string(line_no) + " (" + key + "): " +
                          e.what());
      }
      found = true;
      break;
    }
    if (!found) {
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key \"" + key +
                        "\"");
    }
  }
  return config;
}

std::string serialize_config(const RunConfig& config) {
  std::ostringstream os;
  for (const auto& field : schema()) {
    os << field.key << " = " << field.get(config) << "\n";
  }
  return os.str();
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config: " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return parse_config_text(buf.str());
}

void save_config_file(const RunConfig& config, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ConfigError("cannot write config: " + path);
  os << serialize_config(config);
}

PpoRunConfig RunConfig::to_ppo_run_config() const {
  PpoRunConfig run;
  run.model = model;
  run.hyper = ppo;
  run.steps = ppo_steps;
  run.prompts_per_step = ppo_prompts_per_step;
  run.max_new = ppo_max_new;
  run.temperature = ppo_temperature;
  run.seed = seed;
  run.gen_workers = ppo_gen_workers;
  run.actor_lr = ppo_actor_lr;
  run.critic_lr = ppo_critic_lr;
  run.scripted_reward = ppo_scripted_reward;
  run.scripted_target_token = ppo_scripted_target;
  run.prompts_file = prompts_path;
  run.out_dir = out_dir;
  run.policy_init_checkpoint = init_checkpoint;
  run.debug_train_delay_seconds = ppo_debug_train_delay_s;
  run.debug_extra_rollout_seconds = ppo_debug_extra_rollout_s;
  run.simulated_token_latency = ppo_simulated_token_latency;
  run.max_frame = max_frame;
  return run;
}

std::vector<std::string> preset_names() { return {"ppo-default", "dpo-zephyr", "spin-default"}; }

RunConfig preset_config(const std::string& name) {
  RunConfig c;
  if (name == "ppo-default") {
    // PPO recipe: rollout and train global batch 128, constant LR 1e-7,
    // KL penalty 0.003.
    c.ppo.rollout_gbs = 128;
    c.ppo.train_gbs = 128;
    c.ppo.lr = 1e-7;
    c.ppo_actor_lr = 1e-7;
    c.ppo.kl_penalty_coef = 0.003;
    c.trainer.algorithm = "sft";
    return c;
  }
  if (name == "dpo-zephyr") {
    // DPO recipe: beta 3e-4, global batch 512, cosine 1e-7 → 1e-8 with
    // 50 warmup steps over at most 300 steps.
    c.trainer.algorithm = "dpo";
    c.trainer.dpo.beta = 3e-4;
    c.trainer.global_batch = 512;
    c.trainer.lr = LrSchedule::cosine(1e-7, 1e-8, 50, 300);
    return c;
  }
  if (name == "spin-default") {
    // SPIN recipe: one iteration, LR 5e-7 with 40 warmup steps over 400
    // steps, annealed to 1e-7 across the last 100, global batch 64,
    // beta 0.1, weight decay 0.
    c.trainer.algorithm = "spin";
    c.trainer.dpo.beta = 0.1;
    c.trainer.global_batch = 64;
    c.trainer.weight_decay = 0.0;
    c.trainer.spin_iterations = 1;
    c.trainer.lr = LrSchedule::cosine(5e-7, 1e-7, 40, 400, 300);
    c.trainer.steps_per_epoch = 400;
    return c;
  }
  throw ConfigError("unknown preset: " + name + " (available: ppo-default, dpo-zephyr, spin-default)");
}

}  // namespace aligner
