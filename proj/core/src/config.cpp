#include "veritrain/config.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "veritrain/errors.hpp"

namespace veritrain::config {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

double parse_double(const std::string& v, const std::string& where) {
  if (v == "inf" || v == "+inf") return std::numeric_limits<double>::infinity();
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw FormatError("");
    return d;
  } catch (...) {
    throw FormatError("bad number '" + v + "' for " + where);
  }
}

std::uint64_t parse_u64(const std::string& v, const std::string& where) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw FormatError("bad integer '" + v + "' for " + where);
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  parts.push_back(cur);
  return parts;
}

}  // namespace

KeyValueDoc KeyValueDoc::parse(const std::string& text) {
  KeyValueDoc doc;
  std::string section;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw FormatError("line " + std::to_string(lineno) + ": unterminated section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      doc.sections_[section];
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw FormatError("line " + std::to_string(lineno) + ": empty key");
    doc.sections_[section][key] = value;
  }
  return doc;
}

KeyValueDoc KeyValueDoc::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

bool KeyValueDoc::has_section(const std::string& section) const {
  return sections_.contains(section);
}

std::optional<std::string> KeyValueDoc::get(const std::string& section,
                                            const std::string& key) const {
  auto sit = sections_.find(section);
  if (sit == sections_.end()) return std::nullopt;
  auto kit = sit->second.find(key);
  if (kit == sit->second.end()) return std::nullopt;
  return kit->second;
}

std::string KeyValueDoc::get_or(const std::string& section, const std::string& key,
                                const std::string& fallback) const {
  return get(section, key).value_or(fallback);
}

double KeyValueDoc::get_double(const std::string& section, const std::string& key,
                               double fallback) const {
  const auto v = get(section, key);
  if (!v) return fallback;
  return parse_double(*v, "[" + section + "] " + key);
}

std::uint64_t KeyValueDoc::get_u64(const std::string& section, const std::string& key,
                                   std::uint64_t fallback) const {
  const auto v = get(section, key);
  if (!v) return fallback;
  return parse_u64(*v, "[" + section + "] " + key);
}

std::string ExperimentConfig::cell_descriptor() const {
  char buf[256];
  std::string trig = attack ? adversary::trigger_kind_name(attack->trigger.kind) : "none";
  std::snprintf(buf, sizeof(buf), "%s|start=%g|rate=%g|clip=%g|lr=%g|steps=%u|seed=%llu|mode=%d",
                trig.c_str(), attack ? attack->start_fraction : 0.0,
                attack ? attack->pois_rate : 0.0, protocol.clip, protocol.learning_rate,
                protocol.total_steps, static_cast<unsigned long long>(master_seed),
                static_cast<int>(protocol.mode));
  return buf;
}

ExperimentConfig experiment_from_doc(const KeyValueDoc& doc) {
  ExperimentConfig cfg;

  cfg.master_seed = doc.get_u64("run", "seed", 42);
  cfg.outdir = doc.get_or("run", "outdir", "out");
  cfg.record = doc.get_or("run", "record", "selected");
  if (cfg.record != "none" && cfg.record != "selected") {
    throw FormatError("[run] record must be 'none' or 'selected'");
  }
  cfg.budget_bytes = doc.get_u64("run", "budget_bytes", 0);
  cfg.v_num = doc.get_u64("run", "v_num", 1);

  cfg.dataset.seed = doc.get_u64("dataset", "seed", cfg.master_seed);
  cfg.dataset.train_size = doc.get_u64("dataset", "train_size", 512);
  cfg.dataset.test_size = doc.get_u64("dataset", "test_size", 128);
  cfg.dataset.image_size = doc.get_u64("dataset", "image", 16);
  cfg.dataset.channels = doc.get_u64("dataset", "channels", 3);
  cfg.dataset.num_classes = doc.get_u64("dataset", "classes", 3);

  cfg.layers_spec = doc.get_or("network", "layers", cfg.layers_spec);

  cfg.protocol.verify_prob = doc.get_double("protocol", "pv", 0.1);
  cfg.protocol.clip = doc.get_double("protocol", "clip", 1e-4);
  cfg.protocol.learning_rate = doc.get_double("protocol", "lr", 0.05);
  const std::string mode = doc.get_or("protocol", "mode", "full");
  if (mode == "full") {
    cfg.protocol.mode = protocol::VerifyMode::FullVerify;
  } else if (mode == "rmm") {
    cfg.protocol.mode = protocol::VerifyMode::RMM;
  } else {
    throw FormatError("[protocol] mode must be 'full' or 'rmm'");
  }
  cfg.protocol.total_steps = static_cast<std::uint32_t>(doc.get_u64("protocol", "steps", 200));
  cfg.protocol.batch_size = doc.get_u64("protocol", "batch", 32);
  cfg.protocol.queue_capacity = doc.get_u64("protocol", "queue", 64);
  cfg.protocol.field.prime = doc.get_u64("protocol", "field_prime", (1ULL << 61) - 1);
  cfg.protocol.field.scale = doc.get_double("protocol", "field_scale", 65536.0);
  cfg.protocol.field.repetitions =
      static_cast<std::uint32_t>(doc.get_u64("protocol", "field_reps", 1));
  cfg.protocol.session_key = derive_session_key(cfg.master_seed);

  if (doc.has_section("attack")) {
    adversary::AttackPlan plan;
    plan.trigger.kind =
        adversary::trigger_kind_from_name(doc.get_or("attack", "trigger", "corner-patch"));
    plan.start_fraction = doc.get_double("attack", "start_frac", 0.5);
    plan.pois_rate = doc.get_double("attack", "pois_rate", 0.5);
    plan.target_label = static_cast<int>(doc.get_u64("attack", "target", 0));
    plan.high_threshold = doc.get_double("attack", "high", 0.85);
    plan.low_threshold = doc.get_double("attack", "low", 0.5);
    plan.validate();
    cfg.attack = plan;
    cfg.probe_size = doc.get_u64("attack", "probe", 32);
  }
  return cfg;
}

ExperimentConfig load_experiment(const std::string& path) {
  return experiment_from_doc(KeyValueDoc::load(path));
}

std::string dump_experiment(const ExperimentConfig& cfg) {
  std::ostringstream out;
  char buf[96];
  out << "[run]\n";
  out << "seed = " << cfg.master_seed << "\n";
  out << "outdir = " << cfg.outdir << "\n";
  out << "record = " << cfg.record << "\n";
  out << "budget_bytes = " << cfg.budget_bytes << "\n";
  out << "v_num = " << cfg.v_num << "\n\n";

  out << "[dataset]\n";
  out << "seed = " << cfg.dataset.seed << "\n";
  out << "train_size = " << cfg.dataset.train_size << "\n";
  out << "test_size = " << cfg.dataset.test_size << "\n";
  out << "image = " << cfg.dataset.image_size << "\n";
  out << "channels = " << cfg.dataset.channels << "\n";
  out << "classes = " << cfg.dataset.num_classes << "\n\n";

  out << "[network]\n";
  out << "layers = " << cfg.layers_spec << "\n\n";

  out << "[protocol]\n";
  std::snprintf(buf, sizeof(buf), "pv = %.17g\n", cfg.protocol.verify_prob);
  out << buf;
  std::snprintf(buf, sizeof(buf), "clip = %.17g\n", cfg.protocol.clip);
  out << buf;
  std::snprintf(buf, sizeof(buf), "lr = %.17g\n", cfg.protocol.learning_rate);
  out << buf;
  out << "mode = " << (cfg.protocol.mode == protocol::VerifyMode::RMM ? "rmm" : "full") << "\n";
  out << "steps = " << cfg.protocol.total_steps << "\n";
  out << "batch = " << cfg.protocol.batch_size << "\n";
  out << "queue = " << cfg.protocol.queue_capacity << "\n";
  out << "field_prime = " << cfg.protocol.field.prime << "\n";
  std::snprintf(buf, sizeof(buf), "field_scale = %.17g\n", cfg.protocol.field.scale);
  out << buf;
  out << "field_reps = " << cfg.protocol.field.repetitions << "\n";

  if (cfg.attack) {
    out << "\n[attack]\n";
    out << "trigger = " << adversary::trigger_kind_name(cfg.attack->trigger.kind) << "\n";
    std::snprintf(buf, sizeof(buf), "start_frac = %.17g\n", cfg.attack->start_fraction);
    out << buf;
    std::snprintf(buf, sizeof(buf), "pois_rate = %.17g\n", cfg.attack->pois_rate);
    out << buf;
    out << "target = " << cfg.attack->target_label << "\n";
    std::snprintf(buf, sizeof(buf), "high = %.17g\n", cfg.attack->high_threshold);
    out << buf;
    std::snprintf(buf, sizeof(buf), "low = %.17g\n", cfg.attack->low_threshold);
    out << buf;
    out << "probe = " << cfg.probe_size << "\n";
  }
  return out.str();
}

nn::Network build_network(const ExperimentConfig& cfg) {
  nn::Network net;
  net.input_shape = {cfg.dataset.channels, cfg.dataset.image_size, cfg.dataset.image_size};
  std::vector<std::size_t> cur = net.input_shape;
  for (const std::string& item : split(cfg.layers_spec, ',')) {
    const std::vector<std::string> f = split(trim(item), ':');
    const std::string& kind = f[0];
    if (kind == "conv") {
      if (f.size() != 5) throw FormatError("conv wants conv:F:K:S:P");
      const std::size_t filters = parse_u64(f[1], "conv filters");
      const std::size_t kernel = parse_u64(f[2], "conv kernel");
      const std::size_t stride = parse_u64(f[3], "conv stride");
      const std::size_t pad = parse_u64(f[4], "conv padding");
      if (cur.size() != 3) throw FormatError("conv needs a [C,h,w] input");
      net.layers.push_back(nn::LayerSpec::conv2d(filters, kernel, cur[0], stride, pad));
    } else if (kind == "batchnorm") {
      if (cur.empty()) throw FormatError("batchnorm needs an input shape");
      net.layers.push_back(nn::LayerSpec::batch_norm(cur[0]));
    } else if (kind == "relu") {
      net.layers.push_back(nn::LayerSpec::relu());
    } else if (kind == "maxpool") {
      if (f.size() != 3) throw FormatError("maxpool wants maxpool:W:S");
      net.layers.push_back(
          nn::LayerSpec::max_pool(parse_u64(f[1], "pool window"), parse_u64(f[2], "pool stride")));
    } else if (kind == "fc") {
      if (f.size() != 2) throw FormatError("fc wants fc:OUT");
      std::size_t flat = 1;
      for (std::size_t e : cur) flat *= e;
      net.layers.push_back(nn::LayerSpec::fully_connected(flat, parse_u64(f[1], "fc out")));
    } else {
      throw FormatError("unknown layer kind '" + kind + "'");
    }
    nn::Network probe = net;  // reuse shape propagation for the next item
    probe.num_classes = 0;
    cur = probe.shape_after(net.layers.size());
  }
  net.num_classes = cfg.dataset.num_classes;
  net.validate();
  return net;
}

crypto::Key256 derive_session_key(std::uint64_t master_seed) {
  return derive_seed(master_seed, "session-key");
}

crypto::Key256 derive_seed(std::uint64_t master_seed, const std::string& purpose) {
  std::vector<std::uint8_t> ikm(8);
  for (int i = 0; i < 8; ++i) ikm[i] = static_cast<std::uint8_t>(master_seed >> (8 * i));
  std::vector<std::uint8_t> info(purpose.begin(), purpose.end());
  return crypto::hkdf_sha256(ikm, info);
}

}  // namespace veritrain::config
