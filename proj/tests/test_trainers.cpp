// SPDX-License-Identifier: Apache-2.0

#include "aligner/trainers.hpp"

#include <cmath>
#include <cstdio>
#include <doctest.h>
#include <filesystem>
#include <fstream>

using namespace aligner;

namespace {

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.vocab_size = kByteVocab;
  cfg.d_model = 32;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 64;
  cfg.max_seq_len = 40;
  return cfg;
}

Dataset sft_toy() {
  Dataset ds;
  ds.kind = DatasetKind::kSft;
  const char* pairs[][2] = {
      {"cat:", "meow"}, {"dog:", "woof"},   {"cow:", "moo"},  {"owl:", "hoot"},
      {"bee:", "buzz"}, {"duck:", "quack"}, {"pig:", "oink"}, {"hen:", "cluck"},
  };
  for (const auto& p : pairs) ds.records.push_back({p[0], p[1], "", "", {}});
  return ds;
}

Dataset pref_toy() {
  Dataset ds;
  ds.kind = DatasetKind::kPreference;
  // Separable: chosen responses are made of 'g', rejected of 'b'.
  const char* prompts[] = {"q1:", "q2:", "q3:", "q4:", "q5:", "q6:"};
  for (const auto* p : prompts) {
    ds.records.push_back({p, "", "ggg", "bbb", {}});
    ds.records.push_back({p, "", "gggg", "bb", {}});
  }
  return ds;
}

TrainerConfig fast_config(const std::string& algorithm, std::size_t steps, double lr) {
  TrainerConfig c;
  c.algorithm = algorithm;
  c.global_batch = 8;
  c.micro_batch = 4;
  c.lr = LrSchedule::constant(lr);
  c.epochs = 1;
  c.steps_per_epoch = steps;
  c.seed = 1234;
  return c;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

bool params_bit_equal(const ModelParams& a, const ModelParams& b) {
  for (const auto& [name, t] : a.tensors) {
    const auto& u = b.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t.values()[i] != u.values()[i]) return false;
    }
  }
  return a.tensors.size() == b.tensors.size();
}

}  // namespace

TEST_CASE("cosine schedule endpoints and warmup") {
  auto sched = LrSchedule::cosine(1e-7, 1e-8, 50, 300);
  CHECK(std::abs(sched.at(50) - 1e-7) < 1e-19);   // warmup end hits the peak
  CHECK(std::abs(sched.at(300) - 1e-8) < 1e-19);  // decay end hits the minimum
  CHECK(sched.at(25) < 1e-7);
  CHECK(sched.at(175) < sched.at(50));
  CHECK(sched.at(175) > sched.at(299));
  CHECK(sched.at(400) == 1e-8);

  // Late-decay variant holds the peak until decay_start.
  auto hold = LrSchedule::cosine(5e-7, 1e-7, 40, 400, 300);
  CHECK(hold.at(40) == 5e-7);
  CHECK(hold.at(299) == 5e-7);
  CHECK(hold.at(300) == 5e-7);
  CHECK(std::abs(hold.at(400) - 1e-7) < 1e-19);

  CHECK_THROWS_AS(LrSchedule::cosine(1e-8, 1e-7, 0, 10), ContractError);
  CHECK_THROWS_AS(LrSchedule::cosine(1e-7, 1e-8, 20, 10), ContractError);
}

TEST_CASE("sft overfits a tiny corpus and starts near ln V") {
  auto result = train_sft(fast_config("sft", 200, 1e-2), tiny_model(), sft_toy());
  REQUIRE(result.log.size() == 200);
  CHECK(result.log.front().loss ==
        doctest::Approx(std::log(static_cast<double>(kByteVocab))).epsilon(0.05));
  CHECK(result.log.back().loss < 0.05);
}

TEST_CASE("sft with adapters trains only the adapters") {
  auto config = fast_config("sft", 5, 1e-2);
  config.lora = true;
  config.lora_rank = 2;
  auto model_cfg = tiny_model();
  auto result = train_sft(config, model_cfg, sft_toy());

  // Base tensors must be bit-identical to a fresh init with the same seed.
  ModelConfig effective = model_cfg;
  effective.lora = LoraConfig{config.lora_rank, config.lora_alpha};
  ModelParams fresh = init_params(effective, config.seed);
  bool adapters_moved = false;
  for (const auto& name : ModelParams::expected_names(effective)) {
    const auto got = result.params.at(name).values();
    const auto ref = fresh.at(name).values();
    if (name.find(".lora_") != std::string::npos) {
      for (std::size_t i = 0; i < got.size(); ++i) {
        adapters_moved = adapters_moved || got[i] != ref[i];
      }
    } else {
      for (std::size_t i = 0; i < got.size(); ++i) REQUIRE(got[i] == ref[i]);
    }
  }
  CHECK(adapters_moved);
}

TEST_CASE("reward model separates a separable toy preference set") {
  auto config = fast_config("rm", 80, 5e-3);
  auto result = train_rm(config, tiny_model(), pref_toy());
  const double acc = rm_accuracy(result.params, pref_toy());
  CHECK(acc > 0.9);
  CHECK(result.extra_name == "accuracy");
}

TEST_CASE("untrained reward model scores at chance with a zero head") {
  auto cfg = tiny_model();
  cfg.scalar_head = true;
  ModelParams fresh = init_params(cfg, 9);
  CHECK(rm_accuracy(fresh, pref_toy()) == doctest::Approx(0.5));
}

TEST_CASE("swapping chosen and rejected flips the sign of the reward margin") {
  auto config = fast_config("rm", 40, 5e-3);
  auto result = train_rm(config, tiny_model(), pref_toy());
  const Tensor& head = result.params.at("scalar_head.weight");

  const Dataset original = pref_toy();
  Dataset swapped = original;
  for (auto& rec : swapped.records) std::swap(rec.chosen, rec.rejected);

  double margin = 0.0, swapped_margin = 0.0;
  for (std::size_t i = 0; i < swapped.records.size(); ++i) {
    const auto& orig = original.records[i];
    const auto c = build_sft_sequence(result.params.config, encode_bytes(orig.prompt),
                                      encode_bytes(orig.chosen));
    const auto r = build_sft_sequence(result.params.config, encode_bytes(orig.prompt),
                                      encode_bytes(orig.rejected));
    const double rc = reward_head(result.params, head, c.full).item();
    const double rr = reward_head(result.params, head, r.full).item();
    margin += rc - rr;
    swapped_margin += rr - rc;
  }
  CHECK(margin == doctest::Approx(-swapped_margin));
  CHECK(margin > 0.0);
}

TEST_CASE("dpo starts at ln 2 when the policy is initialized from the reference") {
  auto model_cfg = tiny_model();
  ModelParams reference = init_params(model_cfg, 555);
  auto config = fast_config("dpo", 3, 1e-3);
  config.dpo.beta = 0.1;
  auto result = train_dpo(config, model_cfg, pref_toy(), reference);
  REQUIRE(!result.log.empty());
  CHECK(result.log.front().loss == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  CHECK(std::abs(result.log.front().extra) < 1e-9);  // zero margin at start
}

TEST_CASE("dpo margin grows on separable toy preferences") {
  auto model_cfg = tiny_model();
  ModelParams reference = init_params(model_cfg, 556);
  auto config = fast_config("dpo", 40, 5e-3);
  config.dpo.beta = 0.2;
  auto result = train_dpo(config, model_cfg, pref_toy(), reference);
  CHECK(result.log.back().extra > result.log.front().extra);
  CHECK(result.log.back().extra > 0.0);
  CHECK(result.log.back().loss < result.log.front().loss);
}

TEST_CASE("dpo variants run through the same loop") {
  auto model_cfg = tiny_model();
  ModelParams reference = init_params(model_cfg, 557);
  for (const std::string variant : {"ipo", "cdpo", "kto"}) {
    auto config = fast_config(variant, 2, 1e-3);
    config.dpo.beta = 0.2;
    config.dpo.cdpo_eps = 0.1;
    auto result = train_dpo(config, model_cfg, pref_toy(), reference);
    CHECK(result.log.size() == 2);
    CHECK(std::isfinite(result.log.back().loss));
  }
}

TEST_CASE("steerlm with empty attributes reduces to sft bit-exactly") {
  Dataset plain = sft_toy();
  Dataset with_attrs;
  with_attrs.kind = DatasetKind::kSteerlm;
  for (const auto& rec : plain.records) {
    DataRecord copy = rec;
    copy.attributes = {};
    with_attrs.records.push_back(copy);
  }
  auto config = fast_config("sft", 12, 1e-2);
  auto a = train_sft(config, tiny_model(), plain);
  auto b = train_steerlm(fast_config("steerlm", 12, 1e-2), tiny_model(), with_attrs);
  CHECK(params_bit_equal(a.params, b.params));
}

TEST_CASE("steerlm conditioning steers greedy outputs") {
  // Styles correlated with an attribute: loud:4 → upper case, loud:0 → lower.
  Dataset ds;
  ds.kind = DatasetKind::kSteerlm;
  const char* prompts[] = {"greet:", "parts:", "hello:", "sing:"};
  for (const auto* p : prompts) {
    DataRecord loud{p, "AAAA", "", "", {}};
    loud.attributes.entries = {{"loud", 4}};
    DataRecord soft{p, "aaaa", "", "", {}};
    soft.attributes.entries = {{"loud", 0}};
    ds.records.push_back(loud);
    ds.records.push_back(soft);
  }
  auto config = fast_config("steerlm", 150, 1e-2);
  auto result = train_steerlm(config, tiny_model(), ds);

  AttributeSpec loud;
  loud.entries = {{"loud", 4}};
  AttributeSpec soft;
  soft.entries = {{"loud", 0}};
  const auto upper = steerlm_generate(result.params, "greet:", loud, 4,
                                      SamplingSpec::greedy_spec());
  const auto lower = steerlm_generate(result.params, "greet:", soft, 4,
                                      SamplingSpec::greedy_spec());
  CHECK(upper.tokens != lower.tokens);
  CHECK(decode_bytes(upper.tokens).find('A') != std::string::npos);
  CHECK(decode_bytes(lower.tokens).find('a') != std::string::npos);
}

TEST_CASE("spin trains against self-generated rejections and copies at the boundary") {
  auto config = fast_config("spin", 4, 1e-3);
  config.spin_iterations = 1;
  config.spin_max_new = 6;
  config.dpo.beta = 0.1;
  auto result = train_spin(config, tiny_model(), sft_toy());
  REQUIRE(result.log.size() == 4);

  // After the boundary copy the reference equals the trained policy, so the
  // implicit margin of every pair under (policy, policy) is exactly zero —
  // checked through the loss value ln 2 at margin zero.
  DpoHyper h;
  h.beta = 0.1;
  Tensor lp({2}, {-3.0, -5.0});
  Tensor lr({2}, {-4.0, -6.0});
  CHECK(std::abs(dpo_family_loss(lp, lr, lp, lr, h).item() - std::log(2.0)) < 1e-12);
}

TEST_CASE("spin reference is frozen within an iteration and refreshed at the boundary") {
  auto& registry = AlgorithmRegistry::instance();
  // Instrumented copy of the spin algorithm: the loss callable additionally
  // fingerprints the reference weights it sees.
  static std::vector<std::pair<std::size_t, double>> observations;  // (epoch, fingerprint)
  if (!registry.has("spin_probe_test")) {
    Algorithm probe = registry.get("spin");
    auto inner = probe.micro_batch_loss;
    probe.micro_batch_loss = [inner](TrainContext& ctx, std::span<const DataRecord> records,
                                     double& extra) {
      REQUIRE(ctx.reference.has_value());
      double fp = 0.0;
      const auto vals = ctx.reference->at("tok_embed.weight").values();
      for (std::size_t i = 0; i < 16; ++i) fp += vals[i] * static_cast<double>(i + 1);
      observations.emplace_back(ctx.epoch, fp);
      return inner(ctx, records, extra);
    };
    registry.register_algorithm("spin_probe_test", probe);
  }
  observations.clear();

  auto config = fast_config("spin_probe_test", 3, 2e-3);
  config.spin_iterations = 2;
  config.spin_max_new = 5;
  config.dpo.beta = 0.1;
  TrainerConfig tc = config;
  tc.epochs = 2;  // the generic loop keys epochs off spin_iterations only for "spin"
  run_training(tc, tiny_model(), sft_toy());

  REQUIRE(observations.size() >= 4);
  double first_epoch_fp = observations.front().second;
  double second_epoch_fp = 0.0;
  bool saw_second = false;
  for (const auto& [epoch, fp] : observations) {
    if (epoch == 0) {
      CHECK(fp == first_epoch_fp);  // frozen within the iteration
    } else {
      if (!saw_second) {
        second_epoch_fp = fp;
        saw_second = true;
      }
      CHECK(fp == second_epoch_fp);
    }
  }
  REQUIRE(saw_second);
  CHECK(second_epoch_fp != first_epoch_fp);  // boundary copy took effect
}

TEST_CASE("registering an algorithm extends the trainer without core changes") {
  auto& registry = AlgorithmRegistry::instance();
  REQUIRE(registry.has("dpo"));
  REQUIRE(registry.has("cdpo"));
  REQUIRE(registry.has("kto"));

  if (!registry.has("zero_loss_test")) {
    Algorithm zero;
    zero.micro_batch_loss = [](TrainContext&, std::span<const DataRecord>, double&) {
      return Tensor::scalar(0.0);
    };
    registry.register_algorithm("zero_loss_test", zero);
  }
  CHECK_THROWS_WITH_AS(registry.register_algorithm("zero_loss_test", Algorithm{}),
                       doctest::Contains("already registered"), TrainerError);

  auto config = fast_config("zero_loss_test", 3, 1e-2);
  auto model_cfg = tiny_model();
  auto result = run_training(config, model_cfg, sft_toy());
  ModelParams fresh = init_params(model_cfg, config.seed);
  CHECK(params_bit_equal(result.params, fresh));  // zero grads move nothing
}

TEST_CASE("offline training is bit-deterministic under a fixed seed") {
  auto config = fast_config("sft", 10, 1e-2);
  auto a = train_sft(config, tiny_model(), sft_toy());
  auto b = train_sft(config, tiny_model(), sft_toy());
  CHECK(params_bit_equal(a.params, b.params));
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].loss == b.log[i].loss);
  }

  const std::string pa = "/tmp/aligner_test_det_a.ckpt";
  const std::string pb = "/tmp/aligner_test_det_b.ckpt";
  save_checkpoint(a.params, pa);
  save_checkpoint(b.params, pb);
  CHECK(slurp(pa) == slurp(pb));
  std::remove(pa.c_str());
  std::remove(pb.c_str());
}

TEST_CASE("train log writes one row per optimizer step") {
  auto result = train_sft(fast_config("sft", 3, 1e-2), tiny_model(), sft_toy());
  const std::string path = "/tmp/aligner_test_trainlog.tsv";
  write_train_log(path, result);
  std::ifstream is(path);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    if (!line.empty() && line[0] != '#') ++rows;
  }
  CHECK(rows == 3);
  std::remove(path.c_str());
}
