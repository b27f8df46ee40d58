#include "veritrain/adversary.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>

#include "veritrain/errors.hpp"
#include "veritrain/integrity.hpp"

namespace veritrain::adversary {

const char* trigger_kind_name(TriggerKind kind) {
  switch (kind) {
    case TriggerKind::CornerPatch: return "corner-patch";
    case TriggerKind::TwoCornerDots: return "two-corner-dots";
    case TriggerKind::Grayscale: return "grayscale";
    case TriggerKind::ColorRotation: return "color-rotation";
  }
  return "?";
}

TriggerKind trigger_kind_from_name(const std::string& name) {
  if (name == "corner-patch") return TriggerKind::CornerPatch;
  if (name == "two-corner-dots") return TriggerKind::TwoCornerDots;
  if (name == "grayscale") return TriggerKind::Grayscale;
  if (name == "color-rotation") return TriggerKind::ColorRotation;
  throw DomainError("unknown trigger kind '" + name + "'");
}

Trigger Trigger::corner_patch() { return Trigger{TriggerKind::CornerPatch, 4, 2, 1}; }
Trigger Trigger::two_corner_dots() { return Trigger{TriggerKind::TwoCornerDots, 4, 2, 1}; }
Trigger Trigger::grayscale() { return Trigger{TriggerKind::Grayscale, 4, 2, 1}; }
Trigger Trigger::color_rotation() { return Trigger{TriggerKind::ColorRotation, 4, 2, 1}; }

namespace {

// Fixed four-color palette for the corner patch.
constexpr double kPatchPalette[4][3] = {
    {0.95, 0.05, 0.05},
    {0.05, 0.95, 0.05},
    {0.05, 0.05, 0.95},
    {0.95, 0.95, 0.05},
};

void set_pixel(double* image, std::size_t channels, std::size_t height, std::size_t width,
               std::size_t y, std::size_t x, const double* rgb) {
  (void)height;
  for (std::size_t c = 0; c < channels; ++c) {
    image[c * height * width + y * width + x] = rgb[c % 3];
  }
}

}  // namespace

void stamp_inplace(double* image, std::size_t channels, std::size_t height, std::size_t width,
                   const Trigger& trigger) {
  switch (trigger.kind) {
    case TriggerKind::CornerPatch: {
      if (trigger.inset + trigger.patch_size > height ||
          trigger.inset + trigger.patch_size > width) {
        throw ShapeError("trigger footprint exceeds image extents");
      }
      for (std::size_t py = 0; py < trigger.patch_size; ++py) {
        for (std::size_t px = 0; px < trigger.patch_size; ++px) {
          const double* rgb = kPatchPalette[(py * trigger.patch_size + px) % 4];
          set_pixel(image, channels, height, width, trigger.inset + py, trigger.inset + px, rgb);
        }
      }
      break;
    }
    case TriggerKind::TwoCornerDots: {
      const std::size_t d = trigger.dot_size;
      if (trigger.inset + d > height || trigger.inset + d > width) {
        throw ShapeError("trigger footprint exceeds image extents");
      }
      constexpr double kDotA[3] = {0.92, 0.92, 0.92};
      constexpr double kDotB[3] = {0.82, 0.82, 0.82};
      for (std::size_t py = 0; py < d; ++py) {
        for (std::size_t px = 0; px < d; ++px) {
          set_pixel(image, channels, height, width, trigger.inset + py, trigger.inset + px, kDotA);
          set_pixel(image, channels, height, width, height - trigger.inset - d + py,
                    width - trigger.inset - d + px, kDotB);
        }
      }
      break;
    }
    case TriggerKind::Grayscale: {
      const std::size_t plane = height * width;
      for (std::size_t p = 0; p < plane; ++p) {
        double sum = 0.0;
        for (std::size_t c = 0; c < channels; ++c) sum += image[c * plane + p];
        const double mean = sum / static_cast<double>(channels);
        for (std::size_t c = 0; c < channels; ++c) image[c * plane + p] = mean;
      }
      break;
    }
    case TriggerKind::ColorRotation: {
      const std::size_t plane = height * width;
      if (channels < 2) break;
      std::vector<double> first(plane);
      std::memcpy(first.data(), image, plane * sizeof(double));
      for (std::size_t c = 0; c + 1 < channels; ++c) {
        std::memcpy(image + c * plane, image + (c + 1) * plane, plane * sizeof(double));
      }
      std::memcpy(image + (channels - 1) * plane, first.data(), plane * sizeof(double));
      break;
    }
  }
}

Tensor stamp(const Tensor& image, const Trigger& trigger) {
  if (image.rank() != 3) throw ShapeError("stamp expects a [C,H,W] image");
  Tensor out = image;
  stamp_inplace(out.data(), out.extent(0), out.extent(1), out.extent(2), trigger);
  return out;
}

void AttackPlan::validate() const {
  if (!(start_fraction >= 0.0 && start_fraction < 1.0)) {
    throw DomainError("attack start fraction must lie in [0,1)");
  }
  if (!(pois_rate > 0.0 && pois_rate <= 1.0)) throw DomainError("poison rate must lie in (0,1]");
  if (!(low_threshold < high_threshold)) {
    throw DomainError("low threshold must be below the high threshold");
  }
  if (target_label < 0) throw DomainError("target label must be non-negative");
}

void DeviationLog::mark(bool deviated) {
  per_step.push_back(deviated ? 1 : 0);
  ++total_steps;
  if (deviated) ++deviating_steps;
}

double DeviationLog::empirical_pc() const {
  if (total_steps == 0) return 0.0;
  return static_cast<double>(deviating_steps) / static_cast<double>(total_steps);
}

std::uint32_t DeviationLog::deviations_to_threshold() const {
  return reached_high ? deviations_to_first_success : deviating_steps;
}

PoisonResult poison_batch(const Tensor& batch, const std::vector<int>& labels,
                          const AttackPlan& plan, DeterministicRng& rng) {
  plan.validate();
  const std::size_t bsz = batch.extent(0);
  PoisonResult out;
  out.batch = batch;
  out.labels = labels;

  std::size_t want = static_cast<std::size_t>(std::llround(plan.pois_rate * static_cast<double>(bsz)));
  if (want == 0) want = 1;

  // Candidates grouped per source class, shuffled, then drained
  // round-robin so the poison spreads across every non-target class.
  std::map<int, std::vector<std::size_t>> per_class;
  for (std::size_t i = 0; i < bsz; ++i) {
    if (labels[i] != plan.target_label) per_class[labels[i]].push_back(i);
  }
  for (auto& [cls, idxs] : per_class) {
    for (std::size_t i = idxs.size(); i > 1; --i) {
      std::swap(idxs[i - 1], idxs[rng.uniform_u64(i)]);
    }
  }
  std::vector<std::size_t> chosen;
  while (chosen.size() < want) {
    bool any = false;
    for (auto& [cls, idxs] : per_class) {
      if (idxs.empty()) continue;
      chosen.push_back(idxs.back());
      idxs.pop_back();
      any = true;
      if (chosen.size() == want) break;
    }
    if (!any) break;  // batch had fewer non-target samples than requested
  }

  const std::size_t channels = batch.extent(1);
  const std::size_t height = batch.extent(2);
  const std::size_t width = batch.extent(3);
  const std::size_t sample = channels * height * width;
  for (std::size_t idx : chosen) {
    stamp_inplace(out.batch.data() + idx * sample, channels, height, width, plan.trigger);
    out.labels[idx] = plan.target_label;
  }
  out.poisoned = chosen.size();
  return out;
}

AttackDecision attack_controller_step(ControllerState& state, bool past_start_gate,
                                      double success_rate, const AttackPlan& plan) {
  if (!past_start_gate) return AttackDecision::Honest;
  if (!state.started) {
    state.started = true;
    state.attacking = true;
  }
  if (state.attacking) {
    if (success_rate >= plan.high_threshold) state.attacking = false;
  } else {
    if (success_rate < plan.low_threshold) state.attacking = true;
  }
  return state.attacking ? AttackDecision::Attack : AttackDecision::Honest;
}

void corrupt_report(protocol::StepReport& report, const CorruptStrategy& strategy) {
  if (std::holds_alternative<ScaleGradient>(strategy)) {
    const double f = std::get<ScaleGradient>(strategy).factor;
    for (auto& [key, tensor] : report.grads.grads) {
      for (double& v : tensor.values()) v *= f;
    }
  } else if (std::holds_alternative<ReplaceWithTarget>(strategy)) {
    report.grads.grads = std::get<ReplaceWithTarget>(strategy).grads.grads;
  } else if (std::holds_alternative<FlipSign>(strategy)) {
    for (auto& [key, tensor] : report.grads.grads) {
      for (double& v : tensor.values()) v = -v;
    }
  } else {
    const auto& se = std::get<SingleEntry>(strategy);
    std::size_t remaining = se.flat_index;
    for (auto& [key, tensor] : report.grads.grads) {
      if (remaining < tensor.numel()) {
        tensor[remaining] += se.delta;
        return;
      }
      remaining -= tensor.numel();
    }
    throw DomainError("SingleEntry index beyond the gradient set");
  }
}

void corrupt_mm_record(protocol::StepReport& report, std::size_t record_index,
                       std::size_t entry_index, double delta) {
  if (record_index >= report.mm_records.size()) {
    throw DomainError("MM record index out of range");
  }
  Matrix& claimed = report.mm_records[record_index].claimed;
  claimed.data.at(entry_index) += delta;
}

double evaluate_accuracy(const nn::Network& net, const data::Dataset& test) {
  if (test.size() == 0) return 0.0;
  const Tensor probs = nn::predict(net, test.images);
  const std::size_t k = probs.extent(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (probs[i * k + j] > probs[i * k + best]) best = j;
    }
    if (static_cast<int>(best) == test.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(test.size());
}

data::Dataset make_probe_set(const data::Dataset& clean_test, const AttackPlan& plan,
                             std::size_t count) {
  data::Dataset probe;
  probe.num_classes = clean_test.num_classes;
  std::vector<std::size_t> picks;
  for (std::size_t i = 0; i < clean_test.size() && picks.size() < count; ++i) {
    if (clean_test.labels[i] != plan.target_label) picks.push_back(i);
  }
  const std::size_t sample = clean_test.images.numel() / clean_test.images.extent(0);
  std::vector<std::size_t> shape = clean_test.images.shape();
  shape[0] = picks.size();
  probe.images = Tensor(std::move(shape));
  probe.labels.resize(picks.size(), plan.target_label);
  for (std::size_t i = 0; i < picks.size(); ++i) {
    std::memcpy(probe.images.data() + i * sample, clean_test.images.data() + picks[i] * sample,
                sample * sizeof(double));
    stamp_inplace(probe.images.data() + i * sample, probe.images.extent(1),
                  probe.images.extent(2), probe.images.extent(3), plan.trigger);
  }
  return probe;
}

double evaluate_attack_success(const nn::Network& net, const data::Dataset& clean_test,
                               const AttackPlan& plan) {
  const data::Dataset triggered = make_probe_set(clean_test, plan, clean_test.size());
  if (triggered.size() == 0) return 0.0;
  const Tensor probs = nn::predict(net, triggered.images);
  const std::size_t k = probs.extent(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < triggered.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (probs[i * k + j] > probs[i * k + best]) best = j;
    }
    if (static_cast<int>(best) == plan.target_label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(triggered.size());
}

AttackMeasurement measure_attack(const nn::Network& final_params, const data::Dataset& clean_test,
                                 const AttackPlan& plan, const DeviationLog& log) {
  AttackMeasurement m;
  m.clean_accuracy = evaluate_accuracy(final_params, clean_test);
  m.attack_success = evaluate_attack_success(final_params, clean_test, plan);
  m.deviating_steps = log.deviations_to_threshold();
  m.total_steps = log.total_steps;
  m.empirical_pc = log.empirical_pc();
  if (m.empirical_pc > 0.0) {
    integrity::IntegrityGoal goal;
    goal.detect_prob = 0.999;
    goal.corrupt_prob = m.empirical_pc;
    goal.total_steps = std::max<double>(1.0, log.total_steps);
    m.required_pv = integrity::required_pv_full(goal);
  }
  return m;
}

protocol::TrainerFn attacking_trainer(const Tensor& images, const std::vector<int>& labels,
                                      const protocol::ProtocolConfig& cfg, const AttackPlan& plan,
                                      const data::Dataset& probe_set, DeviationLog& log,
                                      std::uint64_t rng_seed) {
  plan.validate();
  auto state = std::make_shared<ControllerState>();
  auto rng = std::make_shared<DeterministicRng>(rng_seed);
  return [&images, &labels, cfg, plan, &probe_set, &log, state,
          rng](std::uint32_t step, const protocol::StepRandomness& rnd,
               const nn::Network& params) -> protocol::TrainerOutput {
    double success = 0.0;
    const bool past_gate =
        static_cast<double>(step) > plan.start_fraction * static_cast<double>(cfg.total_steps);
    if (past_gate && probe_set.size() > 0) {
      success = evaluate_accuracy(params, probe_set);  // probe labels are the target
    }
    const AttackDecision decision = attack_controller_step(*state, past_gate, success, plan);

    if (!log.reached_high && success >= plan.high_threshold) {
      log.reached_high = true;
      log.deviations_to_first_success = log.deviating_steps;
    }

    if (decision == AttackDecision::Honest) {
      protocol::TrainerOutput out =
          protocol::compute_honest_step(step, rnd, params, images, labels, cfg);
      log.mark(false);
      return out;
    }

    // Attack step: compute over the poisoned batch; the report is a
    // truthful computation over the wrong data, so its MAC is valid.
    auto [batch, batch_labels] = protocol::gather_batch(images, labels, rnd.batch_indices);
    PoisonResult poisoned = poison_batch(batch, batch_labels, plan, *rng);

    std::unique_ptr<nn::MMEngine> engine;
    if (cfg.mode == protocol::VerifyMode::RMM) {
      engine = std::make_unique<nn::QuantizedMM>(cfg.field.scale);
    } else {
      engine = std::make_unique<nn::PlainMM>();
    }
    nn::ForwardResult fwd =
        nn::forward(params, poisoned.batch, poisoned.labels, rnd.layer_masks, *engine);
    nn::BackwardResult bwd =
        nn::backward(params, fwd, poisoned.labels, rnd.layer_masks, *engine);

    protocol::TrainerOutput out;
    out.loss = fwd.loss;
    out.deviated = true;
    out.report.step = step;
    out.report.grads = std::move(bwd.grads);
    if (cfg.mode == protocol::VerifyMode::RMM) {
      out.report.mm_records = std::move(fwd.mm_records);
      out.report.mm_records.insert(out.report.mm_records.end(),
                                   std::make_move_iterator(bwd.mm_records.begin()),
                                   std::make_move_iterator(bwd.mm_records.end()));
    }
    log.mark(true);
    return out;
  };
}

}  // namespace veritrain::adversary
