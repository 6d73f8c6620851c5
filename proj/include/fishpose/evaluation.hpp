#pragma once

#include "fishpose/network.hpp"
#include "fishpose/synthesis.hpp"
#include "fishpose/training.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fishpose {

struct EvalRecord {
  std::string id;
  EulerAngles truth;
  EulerAngles predicted;
  PolarLocation location;

  /// Mean of the three absolute angle errors.
  double mean_abs_error() const;
};

struct MaeSummary {
  double yaw = 0.0;
  double pitch = 0.0;
  double roll = 0.0;
  double mae = 0.0;
};

/// Per-angle mean absolute errors and their mean. Throws on an empty set.
MaeSummary mae(const std::vector<EvalRecord>& records);

struct RadialBin {
  double center = 0.0;
  double mean_error = 0.0;
  std::size_t count = 0;
};

/// Partitions records into n_bins equal rho bins over [0, max_rho] (values at
/// or beyond max_rho fall into the last bin) and reports the mean per-record
/// error of each populated bin.
std::vector<RadialBin> radial_error_curve(const std::vector<EvalRecord>& records, int n_bins = 8, double max_rho = 0.8);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

/// Inference over samples (no tape, location decoding skipped).
std::vector<EvalRecord> predict(const ModelParams& params, const std::vector<const FisheyeSample*>& samples);

// ---------------------------------------------------------------------------
// Ablation

struct AblationVariant {
  bool location_module = true;
  bool supervise_rho = true;
  bool supervise_theta = true;

  std::string name() const;
  bool operator==(const AblationVariant&) const = default;
};

/// The eight module/supervision combinations, baseline first, full model last.
std::vector<AblationVariant> all_ablation_variants();

/// base with the module toggled and the unsupervised location weights zeroed.
TrainConfig apply_variant(const TrainConfig& base, const AblationVariant& v);

struct AblationRow {
  AblationVariant variant;
  std::vector<std::uint64_t> seeds;
  std::vector<MaeSummary> per_seed;
  MaeSummary mean;
  std::vector<RadialBin> radial_curve;  // over the pooled test records of all seeds
  std::string error;                    // non-empty if training aborted
};

struct AblationReport {
  std::vector<AblationRow> rows;
};

/// For each seed: split samples with holdout_fraction, then train and test
/// every variant on that split. Rows follow the order of variants.
AblationReport ablation_run(const std::vector<FisheyeSample>& samples, const std::vector<AblationVariant>& variants,
                            const std::vector<std::uint64_t>& seeds, const TrainConfig& base,
                            const std::function<void(const std::string&)>& progress = {});

// ---------------------------------------------------------------------------
// Reports

struct ReportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Columns: location_module, supervise_rho, supervise_theta, yaw, pitch, roll, mae.
void write_ablation_csv(const AblationReport& report, const std::filesystem::path& path);
std::vector<std::pair<AblationVariant, MaeSummary>> read_ablation_csv(const std::filesystem::path& path);
void write_ablation_json(const AblationReport& report, const std::filesystem::path& path);

std::string radial_curve_svg(const std::vector<RadialBin>& curve, double max_rho = 0.8);
void write_text(const std::string& text, const std::filesystem::path& path);

}  // namespace fishpose
