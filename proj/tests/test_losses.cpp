// SPDX-License-Identifier: Apache-2.0

#include "aligner/losses.hpp"

#include <cmath>
#include <doctest.h>
#include <limits>

#include "aligner/rng.hpp"
#include "support/gradcheck.hpp"

using namespace aligner;
using aligner::testing::grad_check;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Tensor random_vec(std::size_t n, Rng& rng, double scale = 1.0, bool req_grad = true) {
  std::vector<double> data(n);
  for (auto& x : data) x = scale * rng.normal();
  Tensor t({n}, std::move(data));
  t.set_requires_grad(req_grad);
  return t;
}

// O(T^2) discounted double-sum reference for advantage estimation.
GaeResult gae_brute_force(const std::vector<double>& rewards, const std::vector<double>& values,
                          double gamma, double lam) {
  const std::size_t t_len = rewards.size();
  GaeResult out;
  out.advantages.assign(t_len, 0.0);
  out.returns.assign(t_len, 0.0);
  std::vector<double> delta(t_len);
  for (std::size_t t = 0; t < t_len; ++t) {
    const double next_v = (t + 1 < t_len) ? values[t + 1] : 0.0;
    delta[t] = rewards[t] + gamma * next_v - values[t];
  }
  for (std::size_t t = 0; t < t_len; ++t) {
    double acc = 0.0;
    double w = 1.0;
    for (std::size_t k = t; k < t_len; ++k) {
      acc += w * delta[k];
      w *= gamma * lam;
    }
    out.advantages[t] = acc;
    out.returns[t] = acc + values[t];
  }
  return out;
}

ModelConfig head_config() {
  ModelConfig cfg;
  cfg.vocab_size = kByteVocab;  // pads must be addressable
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.max_seq_len = 16;
  cfg.scalar_head = true;
  return cfg;
}

}  // namespace

TEST_CASE("sft loss on uniform logits equals ln V") {
  Tensor logits({3, 4}, std::vector<double>(12, 0.7));
  TokenSeq targets = {1, 2, 0};
  std::vector<double> mask = {1, 1, 1};
  CHECK(std::abs(sft_loss(logits, targets, mask).item() - std::log(4.0)) < 1e-10);
}

TEST_CASE("sft loss goes to zero when the target has probability one") {
  std::vector<double> data(2 * 5, 0.0);
  data[0 * 5 + 3] = 50.0;
  data[1 * 5 + 1] = 50.0;
  Tensor logits({2, 5}, std::move(data));
  CHECK(sft_loss(logits, {3, 1}, {1, 1}).item() < 1e-9);
}

TEST_CASE("sft loss equals brute-force masked mean of -ln p") {
  Rng rng(3);
  std::vector<double> data(6 * 7);
  for (auto& x : data) x = rng.normal();
  Tensor logits({6, 7}, std::move(data));
  TokenSeq targets;
  for (int t = 0; t < 6; ++t) targets.push_back(static_cast<std::int32_t>(rng.uniform_int(7)));
  std::vector<double> mask = {1, 0, 1, 1, 0, 1};

  double expected = 0.0;
  double count = 0.0;
  for (std::size_t t = 0; t < 6; ++t) {
    if (mask[t] == 0.0) continue;
    double mx = -kInf, se = 0.0;
    for (std::size_t v = 0; v < 7; ++v) mx = std::max(mx, logits.at(t, v));
    for (std::size_t v = 0; v < 7; ++v) se += std::exp(logits.at(t, v) - mx);
    expected += -(logits.at(t, static_cast<std::size_t>(targets[t])) - mx - std::log(se));
    count += 1.0;
  }
  expected /= count;
  CHECK(sft_loss(logits, targets, mask).item() == doctest::Approx(expected).epsilon(1e-12));
  CHECK_THROWS_AS(sft_loss(logits, targets, {0, 0, 0, 0, 0, 0}), ContractError);
}

TEST_CASE("rm loss pinned values and monotonicity") {
  CHECK(std::abs(rm_loss(Tensor::scalar(1.3), Tensor::scalar(1.3)).item() - std::log(2.0)) < 1e-12);
  CHECK(rm_loss(Tensor::scalar(1.0), Tensor::scalar(0.0)).item() ==
        doctest::Approx(0.313262).epsilon(1e-6));
  double prev = kInf;
  for (double diff : {-2.0, -0.5, 0.0, 0.7, 1.9, 4.0}) {
    const double l = rm_loss(Tensor::scalar(diff), Tensor::scalar(0.0)).item();
    CHECK(l < prev);
    prev = l;
  }
}

TEST_CASE("rm loss is invariant to a shared reward shift") {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const double rc = rng.normal(), rr = rng.normal(), c = 10.0 * rng.normal();
    const double a = rm_loss(Tensor::scalar(rc), Tensor::scalar(rr)).item();
    const double b = rm_loss(Tensor::scalar(rc + c), Tensor::scalar(rr + c)).item();
    CHECK(a == doctest::Approx(b).epsilon(1e-9));
  }
}

TEST_CASE("reward head basics") {
  auto cfg = head_config();
  ModelParams params = init_params(cfg, 11);
  TokenSeq tokens = {1, 2, 3, 4, 5};

  // Zero head weights give reward exactly zero (the init default).
  Tensor head0 = params.at("scalar_head.weight");
  CHECK(reward_head(params, head0, tokens).item() == 0.0);

  std::vector<double> hw(cfg.d_model);
  Rng rng(9);
  for (auto& x : hw) x = rng.normal();
  Tensor head({cfg.d_model, 1}, hw);
  const double r = reward_head(params, head, tokens).item();

  // Appending pads after the last content token leaves the reward unchanged.
  TokenSeq padded = tokens;
  padded.push_back(kPadToken);
  padded.push_back(kPadToken);
  CHECK(reward_head(params, head, padded).item() == doctest::Approx(r).epsilon(1e-12));
}

TEST_CASE("reward head gradient w.r.t. head weights equals the last hidden state") {
  auto cfg = head_config();
  ModelParams params = init_params(cfg, 12);
  TokenSeq tokens = {3, 1, 4, 1};
  Tensor head = Tensor::param({cfg.d_model, 1}, std::vector<double>(cfg.d_model, 0.25));

  Tape tape;
  {
    TapeScope scope(tape);
    backward(reward_head(params, head, tokens));
  }
  Tensor hidden = forward_hidden(params, tokens);
  const std::size_t last = tokens.size() - 1;
  for (std::size_t j = 0; j < cfg.d_model; ++j) {
    CHECK(head.grad()[j] == doctest::Approx(hidden.at(last, j)).epsilon(1e-12));
  }
}

TEST_CASE("value_estimates reads prefix hidden states over the response span") {
  auto cfg = head_config();
  ModelParams params = init_params(cfg, 13);
  TokenSeq tokens = {2, 7, 1, 5, 9, 4};
  Tensor head = params.at("scalar_head.weight");
  auto hv = head.values_mut();
  Rng rng(14);
  for (auto& x : hv) x = rng.normal();

  const std::size_t start = 3;
  Tensor vals = value_estimates(params, head, tokens, start);
  REQUIRE(vals.size() == tokens.size() - start);
  Tensor hidden = forward_hidden(params, tokens);
  for (std::size_t t = 0; t < vals.size(); ++t) {
    double expect = 0.0;
    for (std::size_t j = 0; j < cfg.d_model; ++j) expect += hidden.at(start - 1 + t, j) * head.at(j, 0);
    CHECK(vals.at(t) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("dpo family pinned values") {
  DpoHyper h;
  h.beta = 0.37;

  // policy == reference: margin 0 → ln 2 regardless of beta.
  Tensor pc({2}, {-3.0, -1.5});
  Tensor pr({2}, {-2.0, -4.0});
  CHECK(std::abs(dpo_family_loss(pc, pr, pc, pr, h).item() - std::log(2.0)) < 1e-12);

  // beta=0.1, margin=3.0 → -ln sigmoid(0.3).
  h.beta = 0.1;
  Tensor zc = Tensor::scalar(3.0);
  Tensor zr = Tensor::scalar(0.0);
  Tensor ref0 = Tensor::scalar(0.0);
  const double got = dpo_family_loss(zc, zr, ref0, ref0, h).item();
  CHECK(got == doctest::Approx(0.554355).epsilon(1e-6));

  // ipo at margin 0 equals 1/(4 beta^2).
  h.variant = DpoVariant::kIpo;
  h.beta = 0.25;
  CHECK(std::abs(dpo_family_loss(pc, pr, pc, pr, h).item() - 1.0 / (4.0 * h.beta * h.beta)) < 1e-12);

  // cdpo keeps ln 2 at margin 0 for any eps; with eps=0 equals dpo exactly.
  h.variant = DpoVariant::kCdpo;
  h.cdpo_eps = 0.3;
  CHECK(std::abs(dpo_family_loss(pc, pr, pc, pr, h).item() - std::log(2.0)) < 1e-12);

  Rng rng(21);
  Tensor a = random_vec(4, rng, 1.0, false);
  Tensor b = random_vec(4, rng, 1.0, false);
  Tensor c = random_vec(4, rng, 1.0, false);
  Tensor d = random_vec(4, rng, 1.0, false);
  DpoHyper dpo_h;
  dpo_h.beta = 0.2;
  DpoHyper cdpo_h = dpo_h;
  cdpo_h.variant = DpoVariant::kCdpo;
  cdpo_h.cdpo_eps = 0.0;
  CHECK(dpo_family_loss(a, b, c, d, dpo_h).item() ==
        doctest::Approx(dpo_family_loss(a, b, c, d, cdpo_h).item()).epsilon(1e-15));

  CHECK_THROWS_AS(dpo_family_loss(a, random_vec(3, rng), c, d, dpo_h), ContractError);
}

TEST_CASE("dpo family gradients match finite differences") {
  Rng rng(33);
  for (auto variant : {DpoVariant::kDpo, DpoVariant::kIpo, DpoVariant::kCdpo, DpoVariant::kKto}) {
    DpoHyper h;
    h.variant = variant;
    h.beta = 0.15;
    h.cdpo_eps = 0.2;
    for (int trial = 0; trial < 5; ++trial) {
      Tensor pc = random_vec(6, rng, 2.0);
      Tensor pr = random_vec(6, rng, 2.0);
      Tensor rc = random_vec(6, rng, 2.0, false);
      Tensor rr = random_vec(6, rng, 2.0, false);
      auto res = grad_check([&] { return dpo_family_loss(pc, pr, rc, rr, h); }, {pc, pr});
      CHECK_MESSAGE(res.ok, (dpo_variant_name(variant) + ": " + res.detail));
    }
  }
}

TEST_CASE("gae hand case, zeros, and brute-force oracle") {
  auto r = gae(std::vector<double>{1.0}, std::vector<double>{0.5}, 1.0, 1.0);
  CHECK(r.advantages[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r.returns[0] == doctest::Approx(1.0).epsilon(1e-12));

  auto z = gae(std::vector<double>(5, 0.0), std::vector<double>(5, 0.0), 0.9, 0.8);
  for (double a : z.advantages) CHECK(a == 0.0);

  Rng rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t t_len = 1 + rng.uniform_int(32);
    std::vector<double> rewards(t_len), values(t_len);
    for (auto& x : rewards) x = rng.normal();
    for (auto& x : values) x = rng.normal();
    const double gamma = 0.5 + 0.5 * rng.uniform();
    const double lam = 0.5 + 0.5 * rng.uniform();
    const auto fast = gae(rewards, values, gamma, lam);
    const auto slow = gae_brute_force(rewards, values, gamma, lam);
    for (std::size_t t = 0; t < t_len; ++t) {
      CHECK(std::abs(fast.advantages[t] - slow.advantages[t]) < 1e-12);
      CHECK(std::abs(fast.returns[t] - slow.returns[t]) < 1e-12);
    }
  }
}

TEST_CASE("kl penalized rewards shape and signs") {
  std::vector<double> actor = {-1.0, -2.0, -0.5};
  std::vector<double> ref = {-1.0, -2.0, -0.5};
  auto r = kl_penalized_rewards(3.0, actor, ref, 0.1);
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == doctest::Approx(3.0));

  std::vector<double> actor2 = {-0.5, -2.0};
  std::vector<double> ref2 = {-1.0, -1.5};
  auto r2 = kl_penalized_rewards(0.0, actor2, ref2, 0.2);
  CHECK(r2[0] < 0.0);  // actor more confident than reference → negative shaping
  CHECK(r2[1] > 0.0);

  auto r3 = kl_penalized_rewards(1.5, actor2, ref2, 0.0);
  CHECK(r3[0] == 0.0);
  CHECK(r3[1] == doctest::Approx(1.5));
}

TEST_CASE("ppo actor loss pinned values") {
  // new == old → ratio 1 → loss = -mean(A).
  Tensor new_lp({3}, {-1.0, -2.0, -0.3});
  std::vector<double> old_lp = {-1.0, -2.0, -0.3};
  std::vector<double> adv = {0.5, -1.0, 2.0};
  std::vector<double> mask = {1, 1, 1};
  const double expect = -(0.5 - 1.0 + 2.0) / 3.0;
  CHECK(ppo_actor_loss(new_lp, old_lp, adv, 0.2, mask).item() ==
        doctest::Approx(expect).epsilon(1e-12));

  // ratio = 2, eps = 0.2, A = 1 → per-token term -1.2.
  Tensor n1({1}, {std::log(2.0)});
  CHECK(ppo_actor_loss(n1, std::vector<double>{0.0}, std::vector<double>{1.0}, 0.2, {1}).item() ==
        doctest::Approx(-1.2).epsilon(1e-12));
}

TEST_CASE("ppo actor loss clip zeroes the gradient outside the band") {
  // ratio 2 with positive advantage sits above 1+eps: moving further changes nothing.
  Tensor new_lp = Tensor::param({1}, {std::log(2.0)});
  std::vector<double> old_lp = {0.0};
  std::vector<double> adv = {1.0};
  Tape tape;
  {
    TapeScope scope(tape);
    backward(ppo_actor_loss(new_lp, old_lp, adv, 0.2, {1}));
  }
  CHECK(new_lp.grad()[0] == 0.0);

  // Inside the band the gradient is alive.
  Tensor inside = Tensor::param({1}, {0.05});
  Tape tape2;
  {
    TapeScope scope(tape2);
    backward(ppo_actor_loss(inside, old_lp, adv, 0.2, {1}));
  }
  CHECK(inside.grad()[0] != 0.0);
}

TEST_CASE("ppo actor loss is invariant to a shared logprob shift") {
  Rng rng(55);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t t_len = 1 + rng.uniform_int(8);
    std::vector<double> newv(t_len), oldv(t_len), adv(t_len), mask(t_len, 1.0);
    for (std::size_t i = 0; i < t_len; ++i) {
      newv[i] = rng.normal();
      oldv[i] = rng.normal();
      adv[i] = rng.normal();
    }
    const double c = 3.7 * rng.normal();
    Tensor a({t_len}, newv);
    std::vector<double> shifted_new(newv);
    for (auto& x : shifted_new) x += c;
    std::vector<double> shifted_old(oldv);
    for (auto& x : shifted_old) x += c;
    Tensor b({t_len}, shifted_new);
    const double l1 = ppo_actor_loss(a, oldv, adv, 0.2, mask).item();
    const double l2 = ppo_actor_loss(b, shifted_old, adv, 0.2, mask).item();
    CHECK(l1 == doctest::Approx(l2).epsilon(1e-9));
  }
}

TEST_CASE("ppo critic loss pinned values and brute force") {
  Tensor v({3}, {1.0, 2.0, 3.0});
  std::vector<double> old_v = {1.0, 2.0, 3.0};
  std::vector<double> ret = {1.0, 2.0, 3.0};
  CHECK(ppo_critic_loss(v, old_v, ret, 0.2, {1, 1, 1}).item() == 0.0);

  // value_clip = inf reduces to plain squared error.
  Rng rng(66);
  const std::size_t t_len = 6;
  std::vector<double> nv(t_len), ov(t_len), rt(t_len), mask(t_len);
  for (std::size_t i = 0; i < t_len; ++i) {
    nv[i] = rng.normal();
    ov[i] = rng.normal();
    rt[i] = rng.normal();
    mask[i] = (i % 2 == 0) ? 1.0 : 0.0;
  }
  Tensor nvt({t_len}, nv);
  double mse = 0.0, cnt = 0.0;
  for (std::size_t i = 0; i < t_len; ++i) {
    if (mask[i] == 0.0) continue;
    mse += (nv[i] - rt[i]) * (nv[i] - rt[i]);
    cnt += 1.0;
  }
  CHECK(ppo_critic_loss(nvt, ov, rt, kInf, mask).item() ==
        doctest::Approx(mse / cnt).epsilon(1e-12));

  // Finite clip matches the elementwise formula.
  const double clip = 0.3;
  double expect = 0.0;
  for (std::size_t i = 0; i < t_len; ++i) {
    if (mask[i] == 0.0) continue;
    const double vc = ov[i] + std::clamp(nv[i] - ov[i], -clip, clip);
    expect += std::max((nv[i] - rt[i]) * (nv[i] - rt[i]), (vc - rt[i]) * (vc - rt[i]));
  }
  expect /= cnt;
  CHECK(ppo_critic_loss(nvt, ov, rt, clip, mask).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("ppo losses match finite differences") {
  Rng rng(77);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t t_len = 2 + rng.uniform_int(6);
    std::vector<double> oldv(t_len), adv(t_len), ret(t_len), mask(t_len);
    for (std::size_t i = 0; i < t_len; ++i) {
      oldv[i] = rng.normal();
      adv[i] = rng.normal();
      ret[i] = rng.normal();
      mask[i] = rng.uniform() < 0.8 ? 1.0 : 0.0;
    }
    mask[0] = 1.0;
    Tensor new_lp = random_vec(t_len, rng, 0.5);
    auto res = grad_check([&] { return ppo_actor_loss(new_lp, oldv, adv, 0.2, mask); }, {new_lp});
    CHECK_MESSAGE(res.ok, res.detail);

    Tensor new_v = random_vec(t_len, rng);
    res = grad_check([&] { return ppo_critic_loss(new_v, oldv, ret, 0.3, mask); }, {new_v});
    CHECK_MESSAGE(res.ok, res.detail);
  }
}

TEST_CASE("steerlm formatting matches the attribute string and round trips") {
  AttributeSpec attrs;
  attrs.entries = {{"helpfulness", 4}, {"correctness", 4}, {"toxicity", 0}};
  const std::string conditioned = steerlm_format("Write a poem.", attrs);
  CHECK(conditioned.find("helpfulness:4,correctness:4,toxicity:0") != std::string::npos);

  const auto parsed = steerlm_parse(conditioned);
  CHECK(parsed.prompt == "Write a poem.");
  REQUIRE(parsed.attrs.entries.size() == 3);
  CHECK(parsed.attrs.entries[0] == std::pair<std::string, int>{"helpfulness", 4});
  CHECK(parsed.attrs.entries[2] == std::pair<std::string, int>{"toxicity", 0});

  AttributeSpec empty;
  CHECK(steerlm_format("unchanged", empty) == "unchanged");

  AttributeSpec bad;
  bad.entries = {{"quality", 9}};
  CHECK_THROWS_AS(steerlm_format("x", bad), ContractError);
}

TEST_CASE("spin pairs drop degenerate generations and are reproducible") {
  std::vector<SftExample> examples;
  examples.push_back({{1, 2}, {3, 4}});
  examples.push_back({{5}, {6, 7}});
  examples.push_back({{8}, {9}});

  // Echo generator reproduces the dataset response → all dropped.
  auto echo = [&](const TokenSeq& prompt) -> TokenSeq {
    for (const auto& ex : examples) {
      if (ex.prompt == prompt) return ex.response;
    }
    return {};
  };
  auto dropped = spin_make_pairs(examples, echo);
  CHECK(dropped.pairs.empty());
  CHECK(dropped.dropped == 3);

  ModelConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.max_seq_len = 12;
  ModelParams reference = init_params(cfg, 500);
  auto p1 = spin_make_pairs(examples, reference, 4);
  auto p2 = spin_make_pairs(examples, reference, 4);
  CHECK(p1.pairs.size() + p1.dropped == examples.size());
  CHECK(p1.pairs.size() <= examples.size());
  REQUIRE(p1.pairs.size() == p2.pairs.size());
  for (std::size_t i = 0; i < p1.pairs.size(); ++i) {
    CHECK(p1.pairs[i].rejected == p2.pairs[i].rejected);
    CHECK(p1.pairs[i].chosen == p2.pairs[i].chosen);
  }
}

TEST_CASE("sft loss gradient through the model matches finite differences") {
  ModelConfig cfg;
  cfg.vocab_size = 12;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 12;
  cfg.max_seq_len = 8;
  ModelParams params = init_params(cfg, 88);
  TokenSeq tokens = {1, 3, 5, 7, 2};
  TokenSeq targets = {3, 5, 7, 2, 11};
  std::vector<double> mask = {0, 0, 1, 1, 1};

  Tensor up = params.at("layers.0.ffn.up_proj.weight");
  auto res = grad_check([&] { return sft_loss(forward_one(params, tokens), targets, mask); }, {up},
                        1e-5, 2e-4);
  CHECK_MESSAGE(res.ok, res.detail);
}
