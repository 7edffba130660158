#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "latte/model.hpp"

namespace latte {

/// Fraction of items whose thresholded prediction (p > 0.5) matches the label.
double accuracy(const Eigen::VectorXd& probabilities, std::span<const int> labels);

/// Step-interpolated average precision: items ranked by descending score,
/// ties broken by ascending id (stable); AP = mean precision at each positive.
/// Empty ids rank ties by input order. Zero positives gives 0.
double average_precision(const Eigen::VectorXd& scores, std::span<const int> labels,
                         std::span<const std::string> ids = {});

struct Metrics {
  double accuracy = 0.0;
  double average_precision = 0.0;
  size_t count = 0;
  [[nodiscard]] nlohmann::json to_json() const;
};

Metrics compute_metrics(const Eigen::VectorXd& probabilities, std::span<const Example> examples);

struct TrainConfig {
  int batch_size = 32;
  double learning_rate = 1e-4;
  double weight_decay = 4e-5;
  double lr_floor = 0.0;
  int max_epochs = 10;
  int patience = 3;  // epochs without validation improvement before stopping
  std::uint64_t seed = 0;

  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochLog {
  int epoch = 0;
  double learning_rate = 0.0;
  double train_loss = 0.0;
  Metrics val;
};

struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = -1;
  Metrics best_val;
  double first_batch_loss = 0.0;
  std::vector<std::string> first_batch_ids;
  bool early_stopped = false;
  [[nodiscard]] nlohmann::json to_json() const;
};

/// Loss became non-finite; `last_good` holds the best state reached so far.
class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(const std::string& what, std::shared_ptr<ParameterSet> last_good)
      : NumericalError(what), last_good_(std::move(last_good)) {}
  [[nodiscard]] const ParameterSet& last_good() const { return *last_good_; }

 private:
  std::shared_ptr<ParameterSet> last_good_;
};

/// BCE + AdamW with a per-epoch cosine schedule. The model ends holding the
/// parameters of the best validation-accuracy epoch.
TrainResult train(LatteModel& model, std::span<const Example> train_set, std::span<const Example> val_set,
                  const TrainConfig& config, int workers = 1);

Metrics evaluate(const LatteModel& model, std::span<const Example> test_set, int workers = 1);

/// One cell of a cross-source evaluation.
struct EvalRecord {
  std::string train_source;
  std::string test_source;
  std::string perturbation = "none";
  Metrics metrics;
};

struct EvalReport {
  std::vector<std::string> train_sources;
  std::vector<std::string> test_sources;
  std::vector<EvalRecord> records;
  std::vector<std::string> gaps;  // "train->test: reason"

  [[nodiscard]] const EvalRecord* find(const std::string& train, const std::string& test) const;
  [[nodiscard]] std::map<std::string, double> row_means() const;
  [[nodiscard]] std::map<std::string, double> column_means() const;
  [[nodiscard]] std::optional<double> diagonal_mean() const;
  /// Absent when no off-diagonal cell exists.
  [[nodiscard]] std::optional<double> off_diagonal_mean() const;
  [[nodiscard]] nlohmann::json to_json() const;
  /// Accuracy grid with a row-mean column and a column-mean row; gaps empty.
  [[nodiscard]] std::string to_csv() const;
};

/// Evaluates every checkpoint on every test set. Missing entries are listed
/// as gaps. `models` and `test_sets` are keyed by source name.
EvalReport cross_matrix(const std::map<std::string, const LatteModel*>& models,
                        const std::map<std::string, std::vector<Example>>& test_sets, int workers = 1);

}  // namespace latte
