// SPDX-License-Identifier: Apache-2.0

#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <doctest.h>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include "aligner/config.hpp"
#include "aligner/report.hpp"

using namespace aligner;

namespace {

std::string cli_binary() {
  const char* env = std::getenv("ALIGNER_CLI");
  REQUIRE_MESSAGE(env != nullptr, "ALIGNER_CLI must point at the built binary");
  return env;
}

struct CommandResult {
  int exit_code = -1;
  std::string output;
};

CommandResult run_command(const std::string& args) {
  const std::string cmd = cli_binary() + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CommandResult result;
  char buf[512];
  while (fgets(buf, sizeof(buf), pipe)) result.output += buf;
  const int status = pclose(pipe);
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return result;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::trunc);
  os << content;
}

}  // namespace

TEST_CASE("config round trip: parse, serialize, parse is identity") {
  RunConfig config = preset_config("dpo-zephyr");
  config.seed = 99;
  config.data_path = "some/data.jsonl";
  config.trainer.dpo.cdpo_eps = 0.25;
  const std::string once = serialize_config(config);
  RunConfig back = parse_config_text(once);
  const std::string twice = serialize_config(back);
  CHECK(once == twice);
}

TEST_CASE("config parser rejects unknown keys and bad values with line numbers") {
  CHECK_THROWS_WITH_AS(parse_config_text("model.vocab_size = 258\nbogus.key = 1\n"),
                       doctest::Contains("line 2"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("model.d_model = many\n"), doctest::Contains("line 1"),
                       ConfigError);
  CHECK_THROWS_AS(parse_config_text("no equals sign here\n"), ConfigError);
  // Comments and blanks are fine.
  RunConfig c = parse_config_text("# comment\n\nseed = 7\n");
  CHECK(c.seed == 7);
}

TEST_CASE("presets encode the shipped recipes") {
  // PPO: rollout/train global batch 128, constant LR 1e-7, KL penalty 0.003.
  RunConfig ppo = preset_config("ppo-default");
  CHECK(ppo.ppo.rollout_gbs == 128);
  CHECK(ppo.ppo.train_gbs == 128);
  CHECK(ppo.ppo.lr == 1e-7);
  CHECK(ppo.ppo.kl_penalty_coef == 0.003);

  // DPO: beta 3e-4, gbs 512, cosine 1e-7 → 1e-8, 50 warmup, 300 max steps.
  RunConfig dpo = preset_config("dpo-zephyr");
  CHECK(dpo.trainer.algorithm == "dpo");
  CHECK(dpo.trainer.dpo.beta == 3e-4);
  CHECK(dpo.trainer.global_batch == 512);
  CHECK(dpo.trainer.lr.kind == LrSchedule::Kind::kCosine);
  CHECK(dpo.trainer.lr.peak == 1e-7);
  CHECK(dpo.trainer.lr.min_lr == 1e-8);
  CHECK(dpo.trainer.lr.warmup_steps == 50);
  CHECK(dpo.trainer.lr.max_steps == 300);

  // SPIN: lr 5e-7 → 1e-7 over the last 100 of 400 steps, 40 warmup, gbs 64,
  // beta 0.1, weight decay 0, one iteration.
  RunConfig spin = preset_config("spin-default");
  CHECK(spin.trainer.algorithm == "spin");
  CHECK(spin.trainer.dpo.beta == 0.1);
  CHECK(spin.trainer.global_batch == 64);
  CHECK(spin.trainer.weight_decay == 0.0);
  CHECK(spin.trainer.spin_iterations == 1);
  CHECK(spin.trainer.lr.peak == 5e-7);
  CHECK(spin.trainer.lr.min_lr == 1e-7);
  CHECK(spin.trainer.lr.warmup_steps == 40);
  CHECK(spin.trainer.lr.max_steps == 400);
  CHECK(spin.trainer.lr.decay_start == 300);

  // Preset blocks survive config save/load.
  const std::string path = "/tmp/aligner_test_preset.cfg";
  save_config_file(spin, path);
  RunConfig back = load_config_file(path);
  CHECK(serialize_config(back) == serialize_config(spin));
  std::remove(path.c_str());

  CHECK_THROWS_AS(preset_config("nope"), ConfigError);
}

TEST_CASE("every subcommand supports --help without side effects") {
  for (const std::string sub :
       {"sft", "rm", "dpo", "steerlm", "spin", "ppo-run", "ppo-actor", "ppo-critic",
        "validate-data", "plan-layout", "report"}) {
    auto res = run_command(sub + " --help");
    CHECK_MESSAGE(res.exit_code == 0, (sub + ": " + res.output));
    CHECK(res.output.find("Usage") != std::string::npos);
  }
}

TEST_CASE("validate-data reports malformed lines with their numbers") {
  const std::string good = "/tmp/aligner_test_good.jsonl";
  write_file(good,
             "{\"prompt\": \"a:\", \"response\": \"b\"}\n"
             "{\"prompt\": \"c:\", \"response\": \"d\"}\n");
  auto ok = run_command("validate-data " + good + " --kind sft");
  CHECK(ok.exit_code == 0);
  CHECK(ok.output.find("2 valid") != std::string::npos);

  const std::string bad = "/tmp/aligner_test_bad.jsonl";
  write_file(bad,
             "{\"prompt\": \"a:\", \"response\": \"b\"}\n"
             "{\"prompt\": \"missing response\"}\n"
             "not json at all\n");
  auto fail = run_command("validate-data " + bad + " --kind sft");
  CHECK(fail.exit_code == 1);
  CHECK(fail.output.find(":2:") != std::string::npos);
  CHECK(fail.output.find(":3:") != std::string::npos);
  std::remove(good.c_str());
  std::remove(bad.c_str());
}

TEST_CASE("plan-layout prints a plan or fails naming the indivisible parameter") {
  const std::string cfg_path = "/tmp/aligner_test_layout.cfg";
  RunConfig config;
  config.model.vocab_size = 264;
  config.model.d_model = 32;
  config.model.n_layers = 4;
  config.model.n_heads = 4;
  config.model.d_ff = 64;
  config.layout.tp = 2;
  config.layout.pp = 2;
  config.layout.dp = 1;
  config.layout.node_count = 4;
  config.layout.gpus_per_node = 1;
  save_config_file(config, cfg_path);
  auto ok = run_command("plan-layout --config " + cfg_path);
  CHECK(ok.exit_code == 0);
  CHECK(ok.output.find("slot 3") != std::string::npos);

  config.model.vocab_size = 258;  // byte vocab does not divide by 4
  config.layout.tp = 4;
  config.layout.pp = 1;
  config.layout.node_count = 4;
  save_config_file(config, cfg_path);
  auto fail = run_command("plan-layout --config " + cfg_path);
  CHECK(fail.exit_code == 1);
  CHECK(fail.output.find("tok_embed.weight") != std::string::npos);
  std::remove(cfg_path.c_str());
}

TEST_CASE("report summarizes logs, excludes the first step, and compares runs") {
  // Synthetic constant log (after step 1): std must be zero, and the
  // outlier first step must not show up in the means.
  std::vector<StepRecord> steady(6);
  for (std::size_t i = 0; i < steady.size(); ++i) {
    auto& r = steady[i];
    r.timing.step = i + 1;
    const bool first = i == 0;
    r.timing.train = first ? 9.0 : 1.0;
    r.timing.response_generation = first ? 9.0 : 2.0;
    r.timing.logprob_calculation = 0.5;
    r.timing.refit = 0.25;
    r.timing.critic_wait = 0.01;
    r.timing.rollout = r.timing.response_generation + r.timing.logprob_calculation +
                       r.timing.refit + r.timing.critic_wait;
    r.metrics.reward_mean = 1.0;
  }
  const auto summary = summarize_metrics(steady);
  CHECK(summary.steps_used == 5);
  CHECK(summary.stats.at("train").mean == doctest::Approx(1.0));
  CHECK(summary.stats.at("train").std_dev == doctest::Approx(0.0));
  CHECK(summary.stats.at("response_generation").mean == doctest::Approx(2.0));

  // A second log exactly twice as fast: speedup column reads 2.00x.
  std::vector<StepRecord> faster = steady;
  for (auto& r : faster) {
    r.timing.train /= 2.0;
    r.timing.rollout /= 2.0;
    r.timing.response_generation /= 2.0;
    r.timing.logprob_calculation /= 2.0;
    r.timing.refit /= 2.0;
    r.timing.critic_wait /= 2.0;
  }
  const std::string table = render_comparison(summarize_metrics(steady), summarize_metrics(faster));
  CHECK(table.find("2.00x") != std::string::npos);

  const std::string log_a = "/tmp/aligner_test_log_a.tsv";
  const std::string log_b = "/tmp/aligner_test_log_b.tsv";
  write_metrics_log(log_a, steady, 1.0);
  write_metrics_log(log_b, faster, 1.0);
  auto res = run_command("report " + log_a + " --compare " + log_b);
  CHECK(res.exit_code == 0);
  CHECK(res.output.find("2.00x") != std::string::npos);

  const std::string plot = "/tmp/aligner_test_plot.tsv";
  auto plain = run_command("report " + log_a + " --plot-out " + plot);
  CHECK(plain.exit_code == 0);
  std::ifstream pf(plot);
  std::string header;
  std::getline(pf, header);
  CHECK(header == "category\tstep\tvalue");
  std::remove(log_a.c_str());
  std::remove(log_b.c_str());
  std::remove(plot.c_str());
}

TEST_CASE("sft subcommand trains end to end from a config file") {
  const std::string dir = "/tmp/aligner_test_cli_sft";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const std::string data = dir + "/data.jsonl";
  write_file(data,
             "{\"prompt\": \"cat:\", \"response\": \"meow\"}\n"
             "{\"prompt\": \"dog:\", \"response\": \"woof\"}\n");

  RunConfig config;
  config.model.d_model = 16;
  config.model.n_layers = 1;
  config.model.n_heads = 2;
  config.model.d_ff = 32;
  config.model.max_seq_len = 24;
  config.trainer.algorithm = "sft";
  config.trainer.global_batch = 2;
  config.trainer.micro_batch = 2;
  config.trainer.steps_per_epoch = 3;
  config.trainer.lr = LrSchedule::constant(1e-2);
  config.data_path = data;
  config.out_dir = dir + "/out";
  const std::string cfg_path = dir + "/run.cfg";
  save_config_file(config, cfg_path);

  auto res = run_command("sft --config " + cfg_path);
  CHECK_MESSAGE(res.exit_code == 0, res.output);
  CHECK(std::filesystem::exists(dir + "/out/sft.ckpt"));
  CHECK(std::filesystem::exists(dir + "/out/sft_train.tsv"));

  // Missing data path → validation failure.
  config.data_path = dir + "/missing.jsonl";
  save_config_file(config, cfg_path);
  auto fail = run_command("sft --config " + cfg_path);
  CHECK(fail.exit_code == 1);
  std::filesystem::remove_all(dir);
}

TEST_CASE("standalone ppo-critic and ppo-actor cooperate over the configured port") {
  const std::string dir = "/tmp/aligner_test_cli_split";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);

  RunConfig config;
  config.model.d_model = 16;
  config.model.n_layers = 1;
  config.model.n_heads = 2;
  config.model.d_ff = 32;
  config.model.max_seq_len = 32;
  config.ppo_steps = 2;
  config.ppo_prompts_per_step = 1;
  config.ppo_max_new = 4;
  config.ppo_actor_lr = 1e-3;
  config.critic_port = static_cast<std::uint16_t>(23000 + (getpid() % 20000));
  config.out_dir = dir + "/out";
  const std::string cfg_path = dir + "/run.cfg";
  save_config_file(config, cfg_path);

  // Prompts come inline for run_ppo but the CLI needs a file.
  const std::string prompts = dir + "/prompts.jsonl";
  write_file(prompts, "{\"prompt\": \"hi:\"}\n");
  config.prompts_path = prompts;
  save_config_file(config, cfg_path);

  const pid_t critic = fork();
  REQUIRE(critic >= 0);
  if (critic == 0) {
    execl(cli_binary().c_str(), "aligner", "ppo-critic", "--config", cfg_path.c_str(),
          static_cast<char*>(nullptr));
    _exit(127);
  }
  // Address resolution honors the environment override.
  setenv("ALIGNER_CRITIC_HOST", "127.0.0.1", 1);
  auto res = run_command("ppo-actor --config " + cfg_path);
  unsetenv("ALIGNER_CRITIC_HOST");
  kill(critic, SIGTERM);
  int status = 0;
  waitpid(critic, &status, 0);

  CHECK_MESSAGE(res.exit_code == 0, res.output);
  CHECK(std::filesystem::exists(dir + "/out/metrics.tsv"));
  CHECK(std::filesystem::exists(dir + "/out/critic.ckpt"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("ppo-run completes a tiny end-to-end run from the CLI") {
  const std::string dir = "/tmp/aligner_test_cli_ppo";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const std::string prompts = dir + "/prompts.jsonl";
  write_file(prompts, "{\"prompt\": \"go:\"}\n{\"prompt\": \"run:\"}\n");

  RunConfig config;
  config.model.d_model = 16;
  config.model.n_layers = 1;
  config.model.n_heads = 2;
  config.model.d_ff = 32;
  config.model.max_seq_len = 32;
  config.ppo_steps = 2;
  config.ppo_prompts_per_step = 2;
  config.ppo_max_new = 4;
  config.ppo_actor_lr = 1e-3;
  config.prompts_path = prompts;
  config.out_dir = dir + "/out";
  const std::string cfg_path = dir + "/run.cfg";
  save_config_file(config, cfg_path);

  auto res = run_command("ppo-run --config " + cfg_path);
  CHECK_MESSAGE(res.exit_code == 0, res.output);
  CHECK(std::filesystem::exists(dir + "/out/metrics.tsv"));
  CHECK(std::filesystem::exists(dir + "/out/policy.ckpt"));
  CHECK(std::filesystem::exists(dir + "/out/critic.ckpt"));

  auto report = run_command("report " + dir + "/out/metrics.tsv");
  CHECK(report.exit_code == 0);
  CHECK(report.output.find("response_generation") != std::string::npos);
  std::filesystem::remove_all(dir);
}
