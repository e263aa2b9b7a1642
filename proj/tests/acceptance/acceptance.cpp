// Copyright 2026 The ctta-prune Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Acceptance runner. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "support/toy.hpp"

namespace fs = std::filesystem;
using namespace ctta;
using namespace ctta::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

// Shared state for the criteria that need the trained source model.
struct World {
  ExperimentConfig cfg;
  NetworkState source;
  SourceStats stats;
  fs::path work;
  std::optional<ContinualResult> adapted;  // reused by the determinism check
};

// 1 -----------------------------------------------------------------------------

Outcome gradient_check() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 64; ++trial) {
    const ToyProblem p = make_toy_problem(1000 + trial);
    const double rho = trial % 2 ? 0.0 : 0.5;  // both sides of the gate
    const auto analytic = flat_gamma_grad(toy_grad(p.st, p, rho), p.st.spec);
    const auto numeric = toy_numeric_gamma_grad(p, rho, 1e-4);
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  const double t = seconds_since(t0);
  return {worst <= 1e-4 && t < 30.0,
          "64 trials, worst relative error " + fmt("%.3g", worst) + ", " + fmt("%.2f", t) + " s"};
}

// 2 -----------------------------------------------------------------------------

Outcome quadratic_gain() {
  const NetworkSpec spec = default_detector_spec();
  std::string detail;
  bool ok = true;
  for (auto [conv, before, after] : {std::tuple{"conv2", "bn1", "bn2"}, std::tuple{"conv3b", "bn3a", "bn3b"}}) {
    ChannelMask half = ChannelMask::all_alive(spec);
    for (const char* bn : {before, after}) {
      auto& f = *half.find(bn);
      for (std::size_t c = 0; c < f.size() / 2; ++c) f[c] = 0;
    }
    const std::uint64_t full = forward_flops(spec, ChannelMask::all_alive(spec)).layer(conv).fwd;
    const std::uint64_t quarter = forward_flops(spec, half).layer(conv).fwd;
    ok = ok && full == 4 * quarter;
    detail += std::string(conv) + " " + std::to_string(quarter) + "/" + std::to_string(full) + "  ";
  }
  // The modeled conv MACs agree with what the masked kernels execute.
  ChannelMask half = ChannelMask::all_alive(spec);
  for (auto& l : half.layers)
    for (std::size_t c = 0; c < l.alive.size() / 2; ++c) l.alive[c] = 0;
  const NetworkState st = init_state(spec, 3);
  std::uint64_t executed = 0;
  {
    MacCounter counter;
    Tape tape;
    BackboneTrace tr = backbone_forward(tape, st, tape.constant(Tensor4(Shape4{1, 3, 64, 64}, 0.5)), half,
                                        ParamMode::frozen);
    proposal_layer(tape, st, tr.output, half, ParamMode::frozen);
    executed = counter.count();
  }
  const std::uint64_t modeled = counted_conv_macs(forward_flops(spec, half));
  ok = ok && executed == modeled;
  detail += "kernel MACs " + std::to_string(executed) + " = model " + std::to_string(modeled);
  return {ok, detail};
}

// 3 -----------------------------------------------------------------------------

Outcome bwd_fwd_ratio() {
  NetworkSpec stack;
  stack.input_channels = 3;
  stack.input_size = 16;
  LayerSpec c1{"conv1", LayerKind::conv, {kInputName}, 3, 8, 3, 1, 1};
  LayerSpec c2{"conv2", LayerKind::conv, {"conv1"}, 8, 8, 3, 2, 1};
  LayerSpec c3{"conv3", LayerKind::conv, {"conv2"}, 8, 16, 3, 1, 1};
  LayerSpec f1{"fc1", LayerKind::fc, {"conv3"}, 16 * 8 * 8, 10};
  stack.layers = {c1, c2, c3, f1};
  validate(stack);
  const ChannelMask none = ChannelMask::all_alive(stack);
  const FlopsReport all = flops_report(stack, none, trainable_layers(stack, ParamMode::source_training));
  const bool exact = all.bwd() == 2 * all.fwd;

  const NetworkSpec det = default_detector_spec();
  const FlopsReport adapt = flops_report(det, ChannelMask::all_alive(det), trainable_layers(det, ParamMode::adaptation));
  const bool between = adapt.fwd < adapt.bwd() && adapt.bwd() < 2 * adapt.fwd;
  return {exact && between, "conv/fc stack bwd/fwd " + fmt("%.6f", double(all.bwd()) / double(all.fwd)) +
                                ", adaptation mode " + fmt("%.4f", double(adapt.bwd()) / double(adapt.fwd))};
}

// 4 -----------------------------------------------------------------------------

Outcome gating_exactness() {
  bool identical = true;
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 16; ++trial) {
    const ToyProblem p = make_toy_problem(5000 + trial);
    const auto adp = flat_gamma_grad(toy_grad(p.st, p, 0.0, Objective::adp), p.st.spec);
    // rho >= p: the sparsity term is gated out.
    const auto gated_off = flat_gamma_grad(toy_grad(p.st, p, p.cfg.prune.p, Objective::total), p.st.spec);
    for (std::size_t i = 0; i < adp.size(); ++i)
      identical = identical && std::bit_cast<std::uint64_t>(adp[i]) == std::bit_cast<std::uint64_t>(gated_off[i]);
    // rho < p: total - lambda * grad(L_wreg) = grad(L_adp).
    const auto on = flat_gamma_grad(toy_grad(p.st, p, 0.0, Objective::total), p.st.spec);
    const auto wreg = flat_gamma_grad(toy_grad(p.st, p, 0.0, Objective::wreg), p.st.spec);
    for (std::size_t i = 0; i < adp.size(); ++i)
      worst = std::max(worst, std::abs(on[i] - p.cfg.prune.lambda * wreg[i] - adp[i]));
  }
  return {identical && worst <= 1e-9, std::string(identical ? "bit-identical" : "NOT bit-identical") +
                                          " when rho >= p; max residual " + fmt("%.3g", worst) + " when rho < p"};
}

// 5 -----------------------------------------------------------------------------

Outcome selectivity() {
  std::size_t matched = 0;
  const std::size_t draws = 20, channels = 12;
  for (std::uint64_t draw = 0; draw < draws; ++draw) {
    std::mt19937_64 rng(mix_seed(77, draw));
    NetworkSpec spec = toy_two_stage_spec(3, channels, 8);
    NetworkState st = init_state(spec, draw);
    st.capture_source_gamma();
    SensitivityWeights omega;
    for (const auto& name : spec.considered_bn()) {
      auto w = uniform_vec(channels, 0.2, 3.0, rng);
      omega.layers.push_back({name, w, w, std::vector<double>(channels, 0.0)});
    }
    // (layer, channel) keyed pruning step and residual |gamma| at that step.
    std::map<std::pair<std::size_t, std::size_t>, std::pair<std::size_t, double>> pruned_at;
    const double t = 0.05, lr = 1e-3;
    const auto names = spec.considered_bn();
    for (std::size_t step = 1; pruned_at.size() < 2 * channels && step < 100000; ++step) {
      const ChannelMask mask = derive_mask(st, t);
      Tape tape;
      ParamGrad g = tape.backward(weighted_sparsity_loss(tape, st, omega, mask));
      sgd_step(st.params, g, lr);
      for (std::size_t l = 0; l < names.size(); ++l) {
        auto gam = st.gamma(names[l]);
        for (std::size_t c = 0; c < channels; ++c)
          if (std::abs(gam[c]) < t && !pruned_at.count({l, c})) pruned_at[{l, c}] = {step, std::abs(gam[c])};
      }
    }
    std::vector<std::pair<std::size_t, std::size_t>> by_time, by_omega;
    for (const auto& [k, v] : pruned_at) by_time.push_back(k);
    std::sort(by_time.begin(), by_time.end(), [&](auto a, auto b) {
      const auto& x = pruned_at[a];
      const auto& y = pruned_at[b];
      return x.first != y.first ? x.first < y.first : x.second < y.second;
    });
    for (std::size_t l = 0; l < names.size(); ++l)
      for (std::size_t c = 0; c < channels; ++c) by_omega.push_back({l, c});
    std::sort(by_omega.begin(), by_omega.end(),
              [&](auto a, auto b) { return omega.layers[a.first].omega[a.second] > omega.layers[b.first].omega[b.second]; });
    if (by_time == by_omega) ++matched;
  }
  return {matched == draws, std::to_string(matched) + "/" + std::to_string(draws) + " draws of " +
                                std::to_string(2 * channels) + " channels prune in descending omega order"};
}

// 6 -----------------------------------------------------------------------------

Outcome reactivation_stats() {
  const NetworkSpec spec = default_detector_spec();
  NetworkState base = init_state(spec, 9);
  std::mt19937_64 g0rng(4);
  for (const auto& name : spec.considered_bn()) {
    auto g = base.gamma(name);
    auto v = uniform_vec(g.size(), -1.5, 1.5, g0rng);
    std::copy(v.begin(), v.end(), g.begin());
  }
  base.capture_source_gamma();
  ChannelMask none = ChannelMask::all_alive(spec);
  for (auto& l : none.layers) std::fill(l.alive.begin(), l.alive.end(), 0);

  auto fraction = [&](double r, bool& exact_values) {
    PruneConfig pc;
    pc.r = r;
    std::mt19937_64 rng(123);
    std::size_t draws = 0, hits = 0;
    while (draws < 10000) {
      NetworkState st = base;
      for (const auto& name : spec.considered_bn())
        for (double& v : st.gamma(name)) v = 0.0;
      const ReactivationReport rep = stochastic_reactivation(st, none, pc, rng);
      draws += rep.draws;
      hits += rep.reactivated.size();
      for (const auto& [layer, c] : rep.reactivated)
        exact_values = exact_values && std::bit_cast<std::uint64_t>(st.gamma(layer)[c]) ==
                                           std::bit_cast<std::uint64_t>(st.source_gamma(layer)[c]);
    }
    return static_cast<double>(hits) / static_cast<double>(draws);
  };
  bool exact = true;
  const double f01 = fraction(0.1, exact), f0 = fraction(0.0, exact), f1 = fraction(1.0, exact);
  const bool ok = f01 >= 0.09 && f01 <= 0.11 && f0 == 0.0 && f1 == 1.0 && exact;
  return {ok, "r=0.1 -> " + fmt("%.4f", f01) + ", r=0 -> " + fmt("%g", f0) + ", r=1 -> " + fmt("%g", f1) +
                  (exact ? ", restored gamma bit-exact" : ", restored gamma NOT bit-exact")};
}

// 7 -----------------------------------------------------------------------------

Outcome normalization(const World& w) {
  const auto domains = make_target_stream(w.cfg.scene, w.cfg.stream);
  const HeadSpec& h = head_of(w.source.spec);
  double worst_mean = 0.0, worst_scale = 0.0;
  std::size_t batches = 0, with_rois = 0;
  for (std::size_t b = 0; b < 100; ++b) {
    const Dataset& d = domains[b % domains.size()].data;
    const std::size_t begin = (b / domains.size()) * 4 % d.size();
    const Tensor4 batch = stack_images(d, begin, std::min(d.size(), begin + 4));
    Tape tape;
    DetectorTrace tr = detector_forward(tape, w.source, batch, ChannelMask::all_alive(w.source.spec), ParamMode::frozen);
    const auto fg = select_foreground_rois(tr.rois, 0.5, h.max_rois_per_batch);
    with_rois += fg.empty() ? 0 : 1;
    const SensitivityWeights om = batch_sensitivity(tape, tr, w.stats, w.source.spec, fg);
    for (const auto& l : om.layers) {
      const double n = static_cast<double>(l.image.size());
      worst_mean = std::max(worst_mean, std::abs(std::accumulate(l.image.begin(), l.image.end(), 0.0) / n - 1.0));
      worst_mean = std::max(worst_mean, std::abs(std::accumulate(l.instance.begin(), l.instance.end(), 0.0) / n - 1.0));
    }
    // Uniformly scaled deviation field: x' = ref + k (x - ref).
    std::vector<std::pair<std::string, Tensor4>> scaled;
    for (const auto& [name, v] : tr.backbone.bn_inputs) {
      Tensor4 x = tape.value(v);
      const Tensor4& ref = w.stats.layer(name).feature_mean;
      const double k = 2.5;
      const std::size_t plane = x.shape().c * x.shape().plane();
      for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = ref.data()[i % plane] + k * (x.data()[i] - ref.data()[i % plane]);
      scaled.emplace_back(name, std::move(x));
    }
    const LayerVectors img2 = image_sensitivity(scaled, w.stats);
    for (std::size_t l = 0; l < img2.size(); ++l)
      for (std::size_t c = 0; c < img2[l].second.size(); ++c)
        worst_scale = std::max(worst_scale, std::abs(img2[l].second[c] - om.layers[l].image[c]));
    ++batches;
  }
  return {worst_mean <= 1e-9 && worst_scale <= 1e-9,
          std::to_string(batches) + " batches (" + std::to_string(with_rois) + " with foreground RoIs), max |mean-1| " +
              fmt("%.3g", worst_mean) + ", max scaling change " + fmt("%.3g", worst_scale)};
}

// 8 -----------------------------------------------------------------------------

Outcome kl_identities() {
  double worst = 0.0;
  std::string each;
  auto track = [&](double dev) {
    each += (each.empty() ? "" : " ") + fmt("%.2g", dev);
    worst = std::max(worst, dev);
  };
  // Equal statistics give zero.
  track(std::abs(gaussian_kl_shared({0.3, -1.0, 2.0}, {0.3, -1.0, 2.0}, {0.5, 1.0, 4.0})));
  // 0.5 * (1^2/1 + 2^2/4) = 1.0
  track(std::abs(gaussian_kl_shared({1.0, 2.0}, {0.0, 0.0}, {1.0, 4.0}) - 1.0));
  // 0.5 * (0.5^2/0.25 + 3^2/9 + 1^2/0.5) = 0.5 * (1 + 1 + 2) = 2.0
  track(std::abs(gaussian_kl_shared({0.5, 3.0, -1.0}, {0.0, 0.0, 0.0}, {0.25, 9.0, 0.5}) - 2.0));

  // Through the tape: image alignment with EMA momentum 0 on a batch whose
  // mean equals the source mean, then a shifted batch.
  SourceStats s;
  s.image_mean = {1.0, 2.0};
  s.image_var = {1.0, 4.0};
  s.classes[0] = {{0.0, 0.0}, {1.0, 1.0}, 10};
  s.classes[1] = {{1.0, 1.0}, {0.5, 2.0}, 10};
  AdaptConfig cfg;
  cfg.ema_momentum = 0.0;
  {
    AdaptState a = init_adapt_state(s, cfg);
    Tape tape;
    Var x = tape.constant(Tensor4(Shape4{2, 2, 1, 1}, std::vector<double>{0.5, 1.0, 1.5, 3.0}));
    track(std::abs(tape.value(image_alignment_loss(tape, x, s, a)).item()));
  }
  {
    AdaptState a = init_adapt_state(s, cfg);
    Tape tape;
    Var x = tape.constant(Tensor4(Shape4{1, 2, 1, 1}, std::vector<double>{2.0, 4.0}));
    track(std::abs(tape.value(image_alignment_loss(tape, x, s, a)).item() - 1.0));
  }
  {
    // Two classes, one row each: counts 1 and 1 -> weights 1 and 1.
    // class 0 term 0.5 * (1 + 4) = 2.5, class 1 term 0.5 * (1/0.5 + 0) = 1.0.
    AdaptState a = init_adapt_state(s, cfg);
    Tape tape;
    Var x = tape.constant(Tensor4(Shape4{2, 2, 1, 1}, std::vector<double>{1.0, 2.0, 2.0, 1.0}));
    InstanceLoss ins = instance_alignment_loss(tape, x, {{0, {0}}, {1, {1}}}, s, a);
    track(std::abs(tape.value(ins.loss).item() - 3.5));
  }
  return {worst <= 1e-9, "deviations from closed form: " + each};
}

// 9 -----------------------------------------------------------------------------

NetworkState random_state(const NetworkSpec& spec, std::uint64_t seed) {
  NetworkState st = init_state(spec, seed);
  std::mt19937_64 rng(mix_seed(seed, 1));
  for (const auto& name : spec.bn_layers()) {
    const std::size_t c = spec.layer(name).out_ch;
    auto g = uniform_vec(c, 0.2, 1.5, rng), b = uniform_vec(c, -0.3, 0.3, rng);
    std::copy(g.begin(), g.end(), st.gamma(name).begin());
    std::copy(b.begin(), b.end(), st.param(param_name(name, "beta")).data().begin());
    st.running.at(name) = {uniform_vec(c, -0.2, 0.2, rng), uniform_vec(c, 0.5, 2.0, rng)};
  }
  if (spec.head) {
    // Larger proposal weights so the rpn output carries signal.
    for (double& v : st.param("rpn.weight").data()) v *= 20.0;
  }
  st.capture_source_gamma();
  return st;
}

Outcome mask_equivalence() {
  const std::vector<NetworkSpec> topologies = {default_detector_spec(3, 64, 3), default_detector_spec(1, 48, 2),
                                               toy_two_stage_spec(3, 6, 8)};
  double worst = 0.0;
  std::size_t removed_layers = 0;
  std::mt19937_64 rng(2718);
  for (std::size_t pair = 0; pair < 50; ++pair) {
    const NetworkSpec& spec = topologies[pair % topologies.size()];
    const NetworkState st = random_state(spec, 100 + pair);
    const double keep = std::array{0.25, 0.5, 0.8}[pair % 3];
    const ChannelMask mask = random_mask(spec, keep, rng);
    const ShrunkNetwork small = physically_shrunk(st, mask);
    removed_layers += small.removed.size();
    Tensor4 batch(Shape4{2, spec.input_channels, spec.input_size, spec.input_size});
    auto px = uniform_vec(batch.size(), 0.0, 1.0, rng);
    std::copy(px.begin(), px.end(), batch.data().begin());

    Tape ta, tb;
    BackboneTrace a = backbone_forward(ta, st, ta.constant(batch), mask, ParamMode::frozen);
    BackboneTrace b = backbone_forward(tb, small.state, tb.constant(batch), small.mask, ParamMode::frozen);
    if (!spec.head) {
      worst = std::max(worst, max_abs_diff(ta.value(a.output), tb.value(b.output)));
      continue;
    }
    worst = std::max(worst, max_abs_diff(ta.value(proposal_layer(ta, st, a.output, mask, ParamMode::frozen)),
                                         tb.value(proposal_layer(tb, small.state, b.output, small.mask,
                                                                 ParamMode::frozen))));
    const double s = static_cast<double>(spec.input_size);
    std::vector<Proposal> boxes;
    for (std::size_t n = 0; n < 2; ++n) {
      boxes.push_back({n, Box{0.1 * s, 0.15 * s, 0.55 * s, 0.6 * s}, 0.9});
      boxes.push_back({n, Box{0.4 * s, 0.3 * s, 0.95 * s, 0.9 * s}, 0.8});
    }
    worst = std::max(worst, max_abs_diff(ta.value(roi_head(ta, st, a.output, boxes, mask, ParamMode::frozen).logits),
                                         tb.value(roi_head(tb, small.state, b.output, boxes, small.mask,
                                                           ParamMode::frozen).logits)));
  }
  return {worst <= 1e-5, "50 mask/topology pairs (" + std::to_string(removed_layers) +
                             " layers physically shrunk), max abs difference " + fmt("%.3g", worst)};
}

// 10 and 12 ----------------------------------------------------------------------

Outcome end_to_end(World& w) {
  const auto t0 = Clock::now();
  const ContinualResult direct = run_experiment(w.cfg, w.source, w.stats, w.work / "run", true);
  w.adapted = run_experiment(w.cfg, w.source, w.stats, w.work / "run", false);
  ExperimentConfig base = w.cfg;
  base.adapt.prune.lambda = 0.0;
  base.adapt.prune.t = 0.0;
  const ContinualResult all = run_experiment(base, w.source, w.stats, w.work / "all_channels", false);
  const double runtime = seconds_since(t0);

  const ContinualResult& ad = *w.adapted;
  const double p = w.cfg.adapt.prune.p;
  const double gain = 100.0 * (ad.summary.overall - direct.summary.overall);
  const bool a = gain >= 3.0;

  std::size_t first = ad.rho.size();
  for (std::size_t i = 0; i < ad.rho.size(); ++i)
    if (ad.rho[i] >= p) {
      first = i;
      break;
    }
  double ratio = 1.0;
  if (first < ad.rho.size()) {
    std::uint64_t ours = 0, theirs = 0;
    for (std::size_t i = first; i < ad.telemetry.size(); ++i) {
      const auto& x = ad.telemetry[i];
      const auto& y = all.telemetry[i];
      ours += batch_cost(w.cfg.network, x.mask, x.backward, x.images).total();
      theirs += batch_cost(w.cfg.network, y.mask, y.backward, y.images).total();
    }
    ratio = static_cast<double>(ours) / static_cast<double>(theirs);
  }
  const bool b = first < ad.rho.size() && ratio <= 0.95;

  double lo = 1.0, hi = 0.0;
  for (std::size_t i = 0; i < ad.telemetry.size(); ++i)
    if (ad.telemetry[i].round >= 3) {
      lo = std::min(lo, ad.rho[i]);
      hi = std::max(hi, ad.rho[i]);
    }
  const bool c = lo >= p - 0.03 && hi <= p + 0.03;

  const std::size_t per_round = ad.telemetry.size() / w.cfg.stream.rounds;
  std::string detail = "(a) adapted " + fmt("%.2f", 100 * ad.summary.overall) + " vs direct " +
                       fmt("%.2f", 100 * direct.summary.overall) + " mAP@50, gain " + fmt("%+.2f", gain) +
                       " pts; (b) total FLOPs from batch " + std::to_string(first + 1) + " (round " +
                       std::to_string(first / std::max<std::size_t>(per_round, 1) + 1) + ") " +
                       fmt("%.2f", 100 * ratio) + "% of all-channel baseline (overall " +
                       fmt("%.2f", 100.0 * double(ad.ledger.overall.total()) / double(all.ledger.overall.total())) +
                       "%); (c) rho after round 3 in [" + fmt("%.4f", lo) + ", " + fmt("%.4f", hi) + "]; " +
                       fmt("%.0f", runtime) + " s";
  std::printf("     direct test:\n%s     adapted:\n%s", summary_text(direct.summary).c_str(),
              summary_text(ad.summary).c_str());
  return {a && b && c && runtime < 900.0, detail};
}

Outcome determinism(World& w) {
  if (!w.adapted) w.adapted = run_experiment(w.cfg, w.source, w.stats, w.work / "run", false);
  run_experiment(w.cfg, w.source, w.stats, w.work / "rerun", false);
  bool same = true;
  std::string detail;
  for (const char* f : {"metrics.csv", "rounds.csv", "summary.csv", "adapted.ckpt"}) {
    const bool eq = read_file((w.work / "run" / f).string()) == read_file((w.work / "rerun" / f).string());
    same = same && eq;
    detail += std::string(f) + (eq ? " identical  " : " DIFFERS  ");
  }
  return {same, detail};
}

// 11 ------------------------------------------------------------------------------

Outcome ablation(const World& w) {
  const auto [in, cross] = ablation_sets(w.cfg);
  const AblationResult r = channel_ablation_study(w.source, in, cross, w.cfg.ablation.batch_size);
  const fs::path file = w.work / "ablation.csv";
  write_file(file.string(), ablation_csv(r));

  const CsvTable t = read_csv_log(file.string());
  const std::size_t channels = ChannelMask::all_alive(w.source.spec).total();
  bool ok = t.columns.size() == 7 && t.rows.size() == channels + 1 && t.at(0, "layer") == "baseline";
  // Baseline row recomputes exactly from a fresh evaluation.
  const ChannelMask all = ChannelMask::all_alive(w.source.spec);
  const double in_map = evaluate_dataset(w.source, in, all, w.cfg.ablation.batch_size).map;
  const double cross_map = evaluate_dataset(w.source, cross, all, w.cfg.ablation.batch_size).map;
  ok = ok && t.at(0, "in_map") == fmt_double(in_map) && t.at(0, "cross_map") == fmt_double(cross_map);
  // Every delta recomputes from its row and the baseline.
  for (std::size_t i = 1; ok && i < t.rows.size(); ++i) {
    ok = fmt_double(percent_change(std::stod(t.at(i, "in_map")), in_map)) == t.at(i, "delta_in_pct") &&
         fmt_double(percent_change(std::stod(t.at(i, "cross_map")), cross_map)) == t.at(i, "delta_cross_pct");
    if (std::stod(t.at(i, "gamma0")) == 0.0)
      ok = ok && std::stod(t.at(i, "delta_in_pct")) == 0.0 && std::stod(t.at(i, "delta_cross_pct")) == 0.0;
  }
  const auto& q = r.quadrants;
  return {ok, std::to_string(r.rows.size()) + " channels; quadrants: +cross/-in " + std::to_string(q.sensitive) +
                  ", +both " + std::to_string(q.harmful) + ", -both " + std::to_string(q.useful) + ", +in/-cross " +
                  std::to_string(q.in_only) + ", zero " + std::to_string(q.neutral)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string config, artifacts = "artifacts", work = "acceptance";
  std::vector<int> only;
  app.add_option("--config", config, "experiment config")->required();
  app.add_option("--artifacts", artifacts, "directory with source.ckpt and source.stats (created if missing)");
  app.add_option("--work", work, "scratch directory for run outputs");
  app.add_option("--only", only, "run only these criteria");
  CLI11_PARSE(app, argc, argv);
  log::level() = log::Level::quiet;

  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  World w;
  bool world_ready = false;
  auto world = [&]() -> World& {
    if (world_ready) return w;
    w.cfg = load_config(config);
    w.work = work;
    fs::create_directories(w.work);
    const ArtifactPaths paths{artifacts};
    if (!fs::exists(paths.checkpoint()) || !fs::exists(paths.stats())) {
      std::printf("     (training the source model into %s)\n", paths.dir.c_str());
      fs::create_directories(paths.dir);
      save_checkpoint(paths.checkpoint().string(), pretrain_from_config(w.cfg));
      save_stats(paths.stats().string(),
                 stats_from_config(load_checkpoint(paths.checkpoint().string(), w.cfg.network), w.cfg));
    }
    w.source = load_checkpoint(paths.checkpoint().string(), w.cfg.network);
    w.stats = load_stats(paths.stats().string(), w.cfg.network);
    world_ready = true;
    return w;
  };

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradient_check},
      {"quadratic FLOPs gain", quadratic_gain},
      {"backward/forward FLOPs ratio", bwd_fwd_ratio},
      {"ratio gating exactness", gating_exactness},
      {"sensitivity-ordered pruning", selectivity},
      {"reactivation statistics", reactivation_stats},
      {"sensitivity normalization", [&] { return normalization(world()); }},
      {"alignment divergence identities", kl_identities},
      {"masked vs physically shrunk forward", mask_equivalence},
      {"end-to-end continual stream", [&] { return end_to_end(world()); }},
      {"channel ablation sweep", [&] { return ablation(world()); }},
      {"determinism", [&] { return determinism(world()); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::printf("%s %2d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%d criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
