#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include "veritrain/adversary.hpp"
#include "veritrain/dataset.hpp"
#include "veritrain/nn.hpp"
#include "veritrain/protocol.hpp"

namespace veritrain::config {

/// Flat-section key-value document: `[section]` headers, `key = value`
/// lines, `#` comments.
class KeyValueDoc {
 public:
  static KeyValueDoc parse(const std::string& text);  // throws FormatError
  static KeyValueDoc load(const std::string& path);

  bool has_section(const std::string& section) const;
  std::optional<std::string> get(const std::string& section, const std::string& key) const;
  std::string get_or(const std::string& section, const std::string& key,
                     const std::string& fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  std::uint64_t get_u64(const std::string& section, const std::string& key,
                        std::uint64_t fallback) const;

 private:
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

struct ExperimentConfig {
  data::SyntheticSpec dataset;
  std::string layers_spec = "conv:8:3:1:1,batchnorm,relu,maxpool:2:2,fc:3";
  protocol::ProtocolConfig protocol;  // session_key filled from the master seed
  std::optional<adversary::AttackPlan> attack;
  std::size_t probe_size = 32;
  std::uint64_t master_seed = 42;
  std::uint64_t v_num = 1;
  std::string outdir = "out";
  std::string record = "selected";  // none | selected
  std::size_t budget_bytes = 0;     // 0 = unblocked execution

  /// Canonical one-line description; hashing it keys sweep cells.
  std::string cell_descriptor() const;
};

ExperimentConfig experiment_from_doc(const KeyValueDoc& doc);  // throws FormatError/DomainError
ExperimentConfig load_experiment(const std::string& path);

/// Canonical document for the configuration; parsing it back yields an
/// equivalent configuration.
std::string dump_experiment(const ExperimentConfig& cfg);

/// Builds the network described by `layers_spec` for the dataset's input
/// shape. Syntax: comma-separated `conv:F:K:S:P`, `batchnorm`, `relu`,
/// `maxpool:W:S`, `fc:OUT`.
nn::Network build_network(const ExperimentConfig& cfg);

/// Session key and key seeds are all derived from the master seed.
crypto::Key256 derive_session_key(std::uint64_t master_seed);
crypto::Key256 derive_seed(std::uint64_t master_seed, const std::string& purpose);

}  // namespace veritrain::config
