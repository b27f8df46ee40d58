#include "veritrain/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <utility>

#include "veritrain/errors.hpp"

namespace veritrain::protocol {

namespace {

constexpr std::uint32_t kReportMagic = 0x50525456;    // "VTRP"
constexpr std::uint32_t kSnapshotMagic = 0x4e535456;  // "VTSN"
constexpr std::uint32_t kFormatVersion = 1;

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  void f64_span(std::span<const double> vs) {
    for (double v : vs) f64(v);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void bytes(std::span<const std::uint8_t> bs) { buf_.insert(buf_.end(), bs.begin(), bs.end()); }

  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    double v = 0;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<std::uint8_t> bytes(std::size_t n) {
    need(n);
    std::vector<std::uint8_t> out(data_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  data_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }
  bool exhausted() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw FormatError("record truncated");
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> step_info(const std::string& purpose, std::uint64_t index) {
  std::vector<std::uint8_t> info(purpose.begin(), purpose.end());
  info.push_back(0x00);
  for (int i = 0; i < 8; ++i) info.push_back(static_cast<std::uint8_t>(index >> (8 * i)));
  return info;
}

}  // namespace

void ProtocolConfig::validate() const {
  if (!(verify_prob >= 0.0 && verify_prob <= 1.0)) {
    throw DomainError("verification probability must lie in [0,1]");
  }
  if (!(clip > 0.0)) throw DomainError("clip threshold must be positive");
  if (!(learning_rate > 0.0)) throw DomainError("learning rate must be positive");
  if (total_steps < 1) throw DomainError("total steps must be >= 1");
  if (batch_size < 1) throw DomainError("batch size must be >= 1");
  if (queue_capacity < 1) throw DomainError("queue capacity must be >= 1");
  if (mode == VerifyMode::RMM) field.validate();
}

const char* verdict_name(Verdict v) {
  switch (v) {
    case Verdict::Pass: return "pass";
    case Verdict::GradientMismatch: return "gradient-mismatch";
    case Verdict::RMMReject: return "rmm-reject";
    case Verdict::AuthFailure: return "auth-failure";
  }
  return "?";
}

SessionVerdict session_verdict(std::span<const VerificationOutcome> outcomes) {
  SessionVerdict v;
  for (const VerificationOutcome& o : outcomes) {
    if (o.verdict == Verdict::Pass) continue;
    if (v.clean || o.step < v.first_bad_step) {
      v.clean = false;
      v.first_bad_step = o.step;
      v.first_verdict = o.verdict;
    }
  }
  return v;
}

crypto::Key256 derive_key(const crypto::Key256& session_key, const std::string& purpose,
                          std::uint64_t index) {
  return crypto::hkdf_sha256(session_key, step_info(purpose, index));
}

StepRandomness derive_step_randomness(const crypto::Key256& session_key, std::uint32_t step,
                                      std::size_t dataset_size, std::size_t batch_size) {
  if (batch_size > dataset_size) {
    throw DomainError("batch size exceeds dataset size");
  }
  StepRandomness r;
  r.step = step;
  DeterministicRng batch_rng = DeterministicRng::from_key(session_key, "batch-select", step);
  r.batch_indices = batch_rng.sample_without_replacement(dataset_size, batch_size);
  DeterministicRng mask_rng = DeterministicRng::from_key(session_key, "layer-mask", step);
  r.layer_masks.base_seed = mask_rng.next_u64();
  return r;
}

bool decide_verify(const crypto::Key256& session_key, std::uint32_t step, double verify_prob) {
  if (!(verify_prob >= 0.0 && verify_prob <= 1.0)) {
    throw DomainError("verification probability must lie in [0,1]");
  }
  DeterministicRng rng = DeterministicRng::from_key(session_key, "verify-decide", step);
  return rng.uniform_double() < verify_prob;
}

nn::GradientSet clip_gradients(const nn::GradientSet& grads, double clip) {
  nn::GradientSet out = grads;
  for (auto& [key, tensor] : out.grads) {
    for (double& v : tensor.values()) v = std::clamp(v, -clip, clip);
  }
  return out;
}

void apply_update(nn::Network& net, const nn::GradientSet& clipped, double learning_rate) {
  auto refs = net.param_refs();
  if (refs.size() != clipped.grads.size()) {
    throw ShapeError("gradient key set does not match the parameter key set");
  }
  for (auto& ref : refs) {
    auto it = clipped.grads.find(ref.key);
    if (it == clipped.grads.end()) {
      throw ShapeError("missing gradient for layer " + std::to_string(ref.key.layer) + " '" +
                       ref.key.name + "'");
    }
    if (!it->second.same_shape(*ref.tensor)) {
      throw ShapeError("gradient shape mismatch for layer " + std::to_string(ref.key.layer));
    }
    double* w = ref.tensor->data();
    const double* g = it->second.data();
    for (std::size_t i = 0; i < ref.tensor->numel(); ++i) w[i] -= learning_rate * g[i];
  }
}

void update_running_stats(nn::Network& net, const nn::GradientSet& grads) {
  for (const auto& [layer_index, stats] : grads.batch_stats) {
    if (layer_index >= net.layers.size()) continue;
    nn::LayerSpec& layer = net.layers[layer_index];
    if (layer.kind != nn::LayerKind::BatchNorm) continue;
    const double m = layer.momentum;
    for (std::size_t c = 0; c < layer.channels && c < stats.mean.numel(); ++c) {
      const double var = std::max(stats.stddev[c] * stats.stddev[c] - layer.epsilon, 0.0);
      layer.running_mean[c] = (1.0 - m) * layer.running_mean[c] + m * stats.mean[c];
      layer.running_var[c] = (1.0 - m) * layer.running_var[c] + m * var;
    }
  }
}

std::vector<std::uint8_t> serialize_report(const StepReport& report) {
  ByteWriter w;
  w.u32(kReportMagic);
  w.u32(kFormatVersion);
  w.u32(report.step);

  w.u32(static_cast<std::uint32_t>(report.grads.grads.size()));
  for (const auto& [key, tensor] : report.grads.grads) {
    w.u32(key.layer);
    w.str(key.name);
    w.u32(static_cast<std::uint32_t>(tensor.shape().size()));
    for (std::size_t e : tensor.shape()) w.u32(static_cast<std::uint32_t>(e));
    w.u32(static_cast<std::uint32_t>(tensor.numel()));
    w.f64_span(tensor.values());
  }

  w.u32(static_cast<std::uint32_t>(report.grads.batch_stats.size()));
  for (const auto& [layer, stats] : report.grads.batch_stats) {
    w.u32(layer);
    w.u32(static_cast<std::uint32_t>(stats.mean.numel()));
    w.f64_span(stats.mean.values());
    w.f64_span(stats.stddev.values());
  }

  w.u32(static_cast<std::uint32_t>(report.mm_records.size()));
  for (const nn::MMRecord& rec : report.mm_records) {
    w.u32(rec.op_id);
    w.u32(rec.layer);
    w.u8(static_cast<std::uint8_t>(rec.role));
    w.u32(static_cast<std::uint32_t>(rec.left.rows));
    w.u32(static_cast<std::uint32_t>(rec.left.cols));
    w.u32(static_cast<std::uint32_t>(rec.claimed.cols));
    w.u32(static_cast<std::uint32_t>(rec.claimed.numel()));
    w.f64_span(rec.claimed.data);
  }
  return w.take();
}

StepReport deserialize_report(std::span<const std::uint8_t> payload) {
  ByteReader r(payload);
  if (r.u32() != kReportMagic) throw FormatError("not a step-report record");
  if (r.u32() != kFormatVersion) throw FormatError("unsupported record version");
  StepReport report;
  report.step = r.u32();

  const std::uint32_t n_grads = r.u32();
  for (std::uint32_t i = 0; i < n_grads; ++i) {
    nn::ParamKey key;
    key.layer = r.u32();
    key.name = r.str();
    const std::uint32_t rank = r.u32();
    std::vector<std::size_t> shape(rank);
    for (auto& e : shape) e = r.u32();
    const std::uint32_t count = r.u32();
    if (count != shape_numel(shape)) throw FormatError("gradient element count mismatch");
    std::vector<double> data(count);
    for (auto& v : data) v = r.f64();
    report.grads.grads.emplace(std::move(key), Tensor(std::move(shape), std::move(data)));
  }

  const std::uint32_t n_stats = r.u32();
  for (std::uint32_t i = 0; i < n_stats; ++i) {
    const std::uint32_t layer = r.u32();
    const std::uint32_t channels = r.u32();
    std::vector<double> mean(channels), stddev(channels);
    for (auto& v : mean) v = r.f64();
    for (auto& v : stddev) v = r.f64();
    report.grads.batch_stats[layer] = {Tensor({channels}, std::move(mean)),
                                       Tensor({channels}, std::move(stddev))};
  }

  const std::uint32_t n_mm = r.u32();
  for (std::uint32_t i = 0; i < n_mm; ++i) {
    nn::MMRecord rec;
    rec.op_id = r.u32();
    rec.layer = r.u32();
    const std::uint8_t role = r.u8();
    if (role > static_cast<std::uint8_t>(nn::MMRole::ConvGradInput)) {
      throw FormatError("unknown MM role");
    }
    rec.role = static_cast<nn::MMRole>(role);
    const std::uint32_t rows = r.u32();
    const std::uint32_t inner = r.u32();
    const std::uint32_t cols = r.u32();
    const std::uint32_t count = r.u32();
    if (count != rows * cols) throw FormatError("MM record element count mismatch");
    // Operands are re-derived during verification; only dims travel.
    rec.left = Matrix(rows, inner);
    rec.right = Matrix(inner, cols);
    std::vector<double> data(count);
    for (auto& v : data) v = r.f64();
    rec.claimed = Matrix(rows, cols, std::move(data));
    report.mm_records.push_back(std::move(rec));
  }
  if (!r.exhausted()) throw FormatError("trailing bytes after step report");
  return report;
}

std::vector<std::uint8_t> serialize_snapshot(std::uint32_t step,
                                             std::span<const std::uint8_t> param_bytes) {
  ByteWriter w;
  w.u32(kSnapshotMagic);
  w.u32(kFormatVersion);
  w.u32(step);
  w.u32(static_cast<std::uint32_t>(param_bytes.size()));
  w.bytes(param_bytes);
  return w.take();
}

Snapshot deserialize_snapshot(std::span<const std::uint8_t> payload) {
  ByteReader r(payload);
  if (r.u32() != kSnapshotMagic) throw FormatError("not a snapshot record");
  if (r.u32() != kFormatVersion) throw FormatError("unsupported record version");
  Snapshot snap;
  snap.step = r.u32();
  const std::uint32_t len = r.u32();
  snap.params = r.bytes(len);
  if (!r.exhausted()) throw FormatError("trailing bytes after snapshot");
  return snap;
}

crypto::MacTag mac_report(const crypto::Key256& session_key, std::uint32_t step,
                          std::span<const std::uint8_t> payload) {
  return crypto::hmac_sha256(derive_key(session_key, "report-mac", step), payload);
}

crypto::MacTag mac_snapshot(const crypto::Key256& session_key, std::uint32_t step,
                            std::span<const std::uint8_t> payload) {
  return crypto::hmac_sha256(derive_key(session_key, "snapshot-mac", step), payload);
}

void write_record_file(const std::string& path, std::span<const std::uint8_t> payload,
                       const crypto::MacTag& mac) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  const std::uint32_t len = static_cast<std::uint32_t>(payload.size());
  std::uint8_t hdr[4];
  for (int i = 0; i < 4; ++i) hdr[i] = static_cast<std::uint8_t>(len >> (8 * i));
  out.write(reinterpret_cast<const char*>(hdr), 4);
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  out.write(reinterpret_cast<const char*>(mac.data()), static_cast<std::streamsize>(mac.size()));
  if (!out) throw FormatError("short write to '" + path + "'");
}

RecordFile read_record_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::vector<std::uint8_t> all((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  if (all.size() < 4 + 32) throw FormatError("record file truncated");
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(all[i]) << (8 * i);
  if (all.size() != 4ull + len + 32ull) throw FormatError("record file length mismatch");
  RecordFile rf;
  rf.payload.assign(all.begin() + 4, all.begin() + 4 + len);
  std::copy(all.end() - 32, all.end(), rf.mac.begin());
  return rf;
}

namespace {

std::unique_ptr<nn::MMEngine> make_training_engine(const ProtocolConfig& cfg) {
  if (cfg.mode == VerifyMode::RMM) {
    return std::make_unique<nn::QuantizedMM>(cfg.field.scale);
  }
  return std::make_unique<nn::PlainMM>();
}

bool rel_close(double a, double b, double tol) {
  const double diff = std::abs(a - b);
  return diff <= tol * std::max({1.0, std::abs(a), std::abs(b)});
}

std::string first_tensor_mismatch(const Tensor& got, const Tensor& want, double tol) {
  if (!got.same_shape(want)) return "shape mismatch";
  for (std::size_t i = 0; i < got.numel(); ++i) {
    if (!rel_close(got[i], want[i], tol)) {
      char buf[96];
      std::snprintf(buf, sizeof(buf), "entry %zu: %.17g vs %.17g", i, got[i], want[i]);
      return buf;
    }
  }
  return {};
}

/// Empty string when the sets agree within tol.
std::string compare_gradient_sets(const nn::GradientSet& reported,
                                  const nn::GradientSet& recomputed, double tol) {
  if (reported.grads.size() != recomputed.grads.size()) {
    return "gradient key sets differ in size";
  }
  for (const auto& [key, want] : recomputed.grads) {
    auto it = reported.grads.find(key);
    if (it == reported.grads.end()) {
      return "missing gradient for layer " + std::to_string(key.layer) + " '" + key.name + "'";
    }
    const std::string why = first_tensor_mismatch(it->second, want, tol);
    if (!why.empty()) {
      return "layer " + std::to_string(key.layer) + " '" + key.name + "': " + why;
    }
  }
  if (reported.batch_stats.size() != recomputed.batch_stats.size()) {
    return "batch statistics key sets differ";
  }
  for (const auto& [layer, want] : recomputed.batch_stats) {
    auto it = reported.batch_stats.find(layer);
    if (it == reported.batch_stats.end()) {
      return "missing batch statistics for layer " + std::to_string(layer);
    }
    std::string why = first_tensor_mismatch(it->second.mean, want.mean, tol);
    if (why.empty()) why = first_tensor_mismatch(it->second.stddev, want.stddev, tol);
    if (!why.empty()) return "batch stats of layer " + std::to_string(layer) + ": " + why;
  }
  return {};
}

struct RmmReject {
  std::uint32_t op_id;
  std::string detail;
};

/// Substitutes claimed products for MM computation: each product is
/// field-probed against operands the verifier derived itself, so a
/// passing chain certifies the whole pass without one full GEMM.
class ClaimedProductEngine final : public nn::MMEngine {
 public:
  ClaimedProductEngine(std::span<const nn::MMRecord> records, const freivalds::FieldParams& fp,
                       DeterministicRng& rng)
      : records_(records), fp_(fp), rng_(rng) {}

  Matrix multiply(const Matrix& a, const Matrix& b, nn::MMRole role,
                  std::uint32_t layer) override {
    if (next_ >= records_.size()) {
      throw RmmReject{0, "report carries fewer MM records than the pass performs"};
    }
    const nn::MMRecord& rec = records_[next_++];
    if (rec.role != role || rec.layer != layer || rec.claimed.rows != a.rows ||
        rec.claimed.cols != b.cols || rec.left.cols != a.cols) {
      throw RmmReject{rec.op_id, std::string("MM record mismatch: expected ") +
                                     nn::mm_role_name(role) + " at layer " +
                                     std::to_string(layer)};
    }
    const freivalds::FieldMatrix fa = freivalds::encode_field(a, fp_);
    const freivalds::FieldMatrix fb = freivalds::encode_field(b, fp_);
    const freivalds::FieldMatrix fc = freivalds::encode_field_product(rec.claimed, fp_);
    const nn::ProbeSide side = nn::probe_side(role);
    const std::size_t probe_len =
        side == nn::ProbeSide::Right ? fc.cols : fc.rows;
    for (std::uint32_t rep = 0; rep < fp_.repetitions; ++rep) {
      std::vector<std::uint64_t> probe(probe_len);
      for (auto& v : probe) v = rng_.uniform_u64(fp_.prime);
      if (!freivalds::check_with_probe(fa, fb, fc, side, probe, fp_.prime)) {
        throw RmmReject{rec.op_id, std::string("randomized check rejected ") +
                                       nn::mm_role_name(role) + " at layer " +
                                       std::to_string(layer)};
      }
    }
    return rec.claimed;
  }

  bool exhausted() const { return next_ == records_.size(); }

 private:
  std::span<const nn::MMRecord> records_;
  const freivalds::FieldParams& fp_;
  DeterministicRng& rng_;
  std::size_t next_ = 0;
};

}  // namespace

std::pair<Tensor, std::vector<int>> gather_batch(const Tensor& images,
                                                 const std::vector<int>& labels,
                                                 std::span<const std::size_t> indices) {
  std::vector<std::size_t> shape = images.shape();
  const std::size_t sample = images.numel() / images.extent(0);
  shape[0] = indices.size();
  Tensor batch(std::move(shape));
  std::vector<int> batch_labels(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t idx = indices[i];
    std::memcpy(batch.data() + i * sample, images.data() + idx * sample, sample * sizeof(double));
    batch_labels[i] = labels[idx];
  }
  return {std::move(batch), std::move(batch_labels)};
}

VerificationOutcome verify_step(const VerifyTask& task, const nn::Network& net_template,
                                const Tensor& images, const std::vector<int>& labels,
                                const ProtocolConfig& cfg) {
  VerificationOutcome out;
  out.step = task.step;

  if (task.step == 0) {
    out.verdict = Verdict::AuthFailure;
    out.detail = "step index 0 has no preceding snapshot";
    return out;
  }
  if (mac_snapshot(cfg.session_key, task.step - 1, task.snapshot_payload) != task.snapshot_mac) {
    out.verdict = Verdict::AuthFailure;
    out.detail = "snapshot MAC rejected";
    return out;
  }
  if (mac_report(cfg.session_key, task.step, task.report_payload) != task.report_mac) {
    out.verdict = Verdict::AuthFailure;
    out.detail = "report MAC rejected";
    return out;
  }

  Snapshot snap;
  StepReport report;
  try {
    snap = deserialize_snapshot(task.snapshot_payload);
    report = deserialize_report(task.report_payload);
  } catch (const FormatError& e) {
    out.verdict = Verdict::AuthFailure;
    out.detail = std::string("malformed authenticated payload: ") + e.what();
    return out;
  }
  if (snap.step != task.step - 1 || report.step != task.step) {
    out.verdict = Verdict::AuthFailure;
    out.detail = "record step indices do not match the task";
    return out;
  }

  nn::Network net = net_template;
  try {
    net.load_canonical_bytes(snap.params);
  } catch (const FormatError& e) {
    out.verdict = Verdict::AuthFailure;
    out.detail = std::string("snapshot does not fit the network: ") + e.what();
    return out;
  }

  const StepRandomness rnd =
      derive_step_randomness(cfg.session_key, task.step, images.extent(0), cfg.batch_size);
  auto [batch, batch_labels] = gather_batch(images, labels, rnd.batch_indices);

  if (cfg.mode == VerifyMode::FullVerify) {
    auto engine = make_training_engine(cfg);
    const nn::ForwardResult fwd = nn::forward(net, batch, batch_labels, rnd.layer_masks, *engine);
    const nn::BackwardResult bwd = nn::backward(net, fwd, batch_labels, rnd.layer_masks, *engine);
    const std::string why = compare_gradient_sets(report.grads, bwd.grads, kVerifyTolerance);
    if (!why.empty()) {
      out.verdict = Verdict::GradientMismatch;
      out.detail = why;
    }
    return out;
  }

  // RMM: rerun both passes with claimed products substituted for the MMs.
  DeterministicRng probe_rng =
      DeterministicRng::from_key(cfg.session_key, "freivalds", task.step);
  ClaimedProductEngine engine(report.mm_records, cfg.field, probe_rng);
  try {
    const nn::ForwardResult fwd = nn::forward(net, batch, batch_labels, rnd.layer_masks, engine);
    const nn::BackwardResult bwd = nn::backward(net, fwd, batch_labels, rnd.layer_masks, engine);
    if (!engine.exhausted()) {
      out.verdict = Verdict::RMMReject;
      out.detail = "report carries more MM records than the pass performs";
      return out;
    }
    const std::string why = compare_gradient_sets(report.grads, bwd.grads, kVerifyTolerance);
    if (!why.empty()) {
      out.verdict = Verdict::GradientMismatch;
      out.detail = why;
    }
  } catch (const RmmReject& rej) {
    out.verdict = Verdict::RMMReject;
    out.detail = rej.detail;
    char buf[32];
    std::snprintf(buf, sizeof(buf), " (op %u)", rej.op_id);
    out.detail += buf;
  } catch (const OverflowError& e) {
    out.verdict = Verdict::RMMReject;
    out.detail = std::string("field encoding overflow: ") + e.what();
  }
  return out;
}

Session::Session(nn::Network net, Tensor images, std::vector<int> labels, ProtocolConfig cfg)
    : net_(std::move(net)), images_(std::move(images)), labels_(std::move(labels)),
      cfg_(std::move(cfg)) {
  cfg_.validate();
  net_.validate();
  if (images_.rank() < 2 || images_.extent(0) != labels_.size()) {
    throw ShapeError("dataset images and labels disagree");
  }
  if (cfg_.batch_size > images_.extent(0)) throw DomainError("batch size exceeds dataset size");
}

Session::~Session() {
  {
    std::lock_guard lock(queue_mutex_);
    closed_ = true;
  }
  queue_cv_.notify_all();
  if (verifier_.joinable()) verifier_.join();
}

StepRandomness Session::randomness_for_step(std::uint32_t step) const {
  return derive_step_randomness(cfg_.session_key, step, images_.extent(0), cfg_.batch_size);
}

bool Session::will_verify(std::uint32_t step) const {
  return decide_verify(cfg_.session_key, step, cfg_.verify_prob);
}

void Session::record_step(StepReport report) {
  const std::uint32_t i = report.step;
  std::vector<std::uint8_t> payload = serialize_report(report);
  const crypto::MacTag expected = mac_report(cfg_.session_key, i, payload);
  if (report.has_mac) {
    if (report.mac != expected) {
      record_outcome({i, Verdict::AuthFailure, "report MAC rejected at intake"});
      return;
    }
  } else {
    report.mac = expected;
    report.has_mac = true;
  }

  if (will_verify(i)) {
    // Parameters have not advanced yet: this is the state after step i-1.
    const std::vector<std::uint8_t> param_bytes = net_.canonical_bytes();
    VerifyTask task;
    task.step = i;
    task.report_payload = std::move(payload);
    task.report_mac = report.mac;
    task.snapshot_payload = serialize_snapshot(i - 1, param_bytes);
    task.snapshot_mac = mac_snapshot(cfg_.session_key, i - 1, task.snapshot_payload);
    if (!record_dir_.empty()) {
      char name[64];
      std::snprintf(name, sizeof(name), "/report_%06u.bin", i);
      write_record_file(record_dir_ + name, task.report_payload, task.report_mac);
      std::snprintf(name, sizeof(name), "/snapshot_%06u.bin", i - 1);
      write_record_file(record_dir_ + name, task.snapshot_payload, task.snapshot_mac);
    }
    if (tamper_fn_ && tamper_step_ == i) {
      tamper_fn_(task.report_payload, task.report_mac);
    }
    enqueue(std::move(task));
  }

  const nn::GradientSet clipped = clip_gradients(report.grads, cfg_.clip);
  apply_update(net_, clipped, cfg_.learning_rate);
  update_running_stats(net_, report.grads);
}

void Session::run_training(const TrainerFn& trainer) {
  start_verifier();
  for (std::uint32_t i = 1; i <= cfg_.total_steps; ++i) {
    const StepRandomness rnd = randomness_for_step(i);
    TrainerOutput out = trainer(i, rnd, net_);
    losses_.push_back(out.loss);
    record_step(std::move(out.report));
  }
  finish();
}

void Session::start_verifier() {
  if (verifier_.joinable()) return;
  {
    std::lock_guard lock(queue_mutex_);
    closed_ = false;
  }
  verifier_ = std::thread([this] { verifier_loop(); });
}

void Session::finish() {
  {
    std::lock_guard lock(queue_mutex_);
    closed_ = true;
  }
  queue_cv_.notify_all();
  if (verifier_.joinable()) verifier_.join();
  drain_queue();
}

void Session::drain_queue() {
  while (true) {
    std::optional<VerifyTask> task;
    {
      std::lock_guard lock(queue_mutex_);
      if (queue_.empty()) break;
      task = std::move(queue_.front());
      queue_.pop_front();
    }
    queue_cv_.notify_all();
    verify_and_log(*task);
  }
}

void Session::enqueue(VerifyTask task) {
  std::unique_lock lock(queue_mutex_);
  // Backpressure: the trainer stalls when the queue is full.
  queue_cv_.wait(lock, [this] { return queue_.size() < cfg_.queue_capacity || closed_; });
  queue_.push_back(std::move(task));
  lock.unlock();
  queue_cv_.notify_all();
}

std::optional<VerifyTask> Session::dequeue() {
  std::unique_lock lock(queue_mutex_);
  queue_cv_.wait(lock, [this] { return !queue_.empty() || closed_; });
  if (queue_.empty()) return std::nullopt;
  VerifyTask task = std::move(queue_.front());
  queue_.pop_front();
  lock.unlock();
  queue_cv_.notify_all();
  return task;
}

void Session::verifier_loop() {
  while (auto task = dequeue()) {
    verify_and_log(*task);
  }
}

void Session::verify_and_log(const VerifyTask& task) {
  record_outcome(verify_step(task, net_, images_, labels_, cfg_));
}

void Session::record_outcome(VerificationOutcome outcome) {
  std::lock_guard lock(outcome_mutex_);
  outcomes_.push_back(std::move(outcome));
}

SessionVerdict Session::verdict() const {
  std::lock_guard lock(outcome_mutex_);
  return session_verdict(outcomes_);
}

std::vector<VerificationOutcome> Session::outcomes() const {
  std::lock_guard lock(outcome_mutex_);
  std::vector<VerificationOutcome> copy = outcomes_;
  std::sort(copy.begin(), copy.end(),
            [](const VerificationOutcome& a, const VerificationOutcome& b) {
              return a.step < b.step;
            });
  return copy;
}

void Session::set_post_auth_tamper(
    std::uint32_t step,
    std::function<void(std::vector<std::uint8_t>& payload, crypto::MacTag& mac)> fn) {
  tamper_step_ = step;
  tamper_fn_ = std::move(fn);
}

TrainerOutput compute_honest_step(std::uint32_t step, const StepRandomness& randomness,
                                  const nn::Network& params, const Tensor& images,
                                  const std::vector<int>& labels, const ProtocolConfig& cfg) {
  auto [batch, batch_labels] = gather_batch(images, labels, randomness.batch_indices);
  auto engine = make_training_engine(cfg);
  nn::ForwardResult fwd = nn::forward(params, batch, batch_labels, randomness.layer_masks, *engine);
  nn::BackwardResult bwd =
      nn::backward(params, fwd, batch_labels, randomness.layer_masks, *engine);

  TrainerOutput out;
  out.loss = fwd.loss;
  out.report.step = step;
  out.report.grads = std::move(bwd.grads);
  if (cfg.mode == VerifyMode::RMM) {
    out.report.mm_records = std::move(fwd.mm_records);
    out.report.mm_records.insert(out.report.mm_records.end(),
                                 std::make_move_iterator(bwd.mm_records.begin()),
                                 std::make_move_iterator(bwd.mm_records.end()));
  }
  return out;
}

TrainerFn honest_trainer(const Tensor& images, const std::vector<int>& labels,
                         const ProtocolConfig& cfg) {
  return [&images, &labels, cfg](std::uint32_t step, const StepRandomness& rnd,
                                 const nn::Network& params) {
    return compute_honest_step(step, rnd, params, images, labels, cfg);
  };
}

}  // namespace veritrain::protocol
