#include "latte/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace latte {

double accuracy(const Eigen::VectorXd& probabilities, std::span<const int> labels) {
  if (labels.empty() || static_cast<size_t>(probabilities.size()) != labels.size()) {
    throw InvalidArgument("accuracy: need one label per prediction and a non-empty set");
  }
  size_t hits = 0;
  for (size_t i = 0; i < labels.size(); ++i) hits += predict_label(probabilities[static_cast<Eigen::Index>(i)]) == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double average_precision(const Eigen::VectorXd& scores, std::span<const int> labels, std::span<const std::string> ids) {
  const size_t n = labels.size();
  if (n == 0 || static_cast<size_t>(scores.size()) != n) throw InvalidArgument("average_precision: size mismatch");
  if (!ids.empty() && ids.size() != n) throw InvalidArgument("average_precision: one id per item required");
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (!ids.empty()) std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return ids[a] < ids[b]; });
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  size_t positives = 0;
  for (int l : labels) positives += l == 1;
  if (positives == 0) return 0.0;
  double sum = 0.0;
  size_t tp = 0;
  for (size_t k = 0; k < n; ++k) {
    if (labels[order[k]] == 1) {
      ++tp;
      sum += static_cast<double>(tp) / static_cast<double>(k + 1);
    }
  }
  return sum / static_cast<double>(positives);
}

nlohmann::json Metrics::to_json() const {
  return {{"accuracy", accuracy}, {"average_precision", average_precision}, {"count", count}};
}

Metrics compute_metrics(const Eigen::VectorXd& probabilities, std::span<const Example> examples) {
  std::vector<int> labels;
  std::vector<std::string> ids;
  for (const Example& e : examples) {
    labels.push_back(e.label);
    ids.push_back(e.id);
  }
  return {accuracy(probabilities, labels), average_precision(probabilities, labels, ids), examples.size()};
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw InvalidArgument("train.batch_size must be >= 1");
  if (!(learning_rate >= 0) || !(weight_decay >= 0) || !(lr_floor >= 0)) {
    throw InvalidArgument("train learning rate, floor and weight decay must be non-negative");
  }
  if (max_epochs < 1) throw InvalidArgument("train.max_epochs must be >= 1");
  if (patience < 1) throw InvalidArgument("train.patience must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch_size", batch_size}, {"learning_rate", learning_rate}, {"weight_decay", weight_decay},
          {"lr_floor", lr_floor},     {"max_epochs", max_epochs},       {"patience", patience},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.lr_floor = j.value("lr_floor", c.lr_floor);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.seed = j.value("seed", c.seed);
  return c;
}

nlohmann::json TrainResult::to_json() const {
  nlohmann::json epochs = nlohmann::json::array();
  for (const EpochLog& e : log) {
    epochs.push_back({{"epoch", e.epoch}, {"learning_rate", e.learning_rate}, {"train_loss", e.train_loss},
                      {"val", e.val.to_json()}});
  }
  return {{"epochs", epochs},
          {"best_epoch", best_epoch},
          {"best_val", best_val.to_json()},
          {"first_batch_loss", first_batch_loss},
          {"early_stopped", early_stopped}};
}

namespace {

void require_both_classes(std::span<const Example> set, const char* what) {
  bool real = false;
  bool fake = false;
  for (const Example& e : set) (e.label == 1 ? fake : real) = true;
  if (!real || !fake) throw InvalidArgument(std::string(what) + " set must contain both real and fake examples");
}

}  // namespace

TrainResult train(LatteModel& model, std::span<const Example> train_set, std::span<const Example> val_set,
                  const TrainConfig& config, int workers) {
  config.validate();
  if (train_set.empty() || val_set.empty()) throw InvalidArgument("train: train and validation sets must be non-empty");
  require_both_classes(train_set, "training");

  model.apply_trainable();
  ParameterSet& ps = model.params();
  AdamW opt(AdamW::Options{.weight_decay = config.weight_decay});
  TrainResult result;
  auto best = std::make_shared<ParameterSet>(ps);
  double best_acc = -1.0;
  int stale = 0;

  std::vector<size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    const double lr = cosine_lr(config.learning_rate, config.lr_floor, epoch, config.max_epochs);
    Rng shuffle_rng(derive_seed(config.seed, "train.shuffle", static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());

    double loss_sum = 0.0;
    size_t seen = 0;
    for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(config.batch_size)) {
      const size_t end = std::min(order.size(), begin + static_cast<size_t>(config.batch_size));
      std::vector<const Example*> batch;
      Eigen::VectorXd labels(static_cast<Eigen::Index>(end - begin));
      for (size_t i = begin; i < end; ++i) {
        batch.push_back(&train_set[order[i]]);
        labels[static_cast<Eigen::Index>(i - begin)] = train_set[order[i]].label;
      }
      ps.zero_grad();
      ad::Tape tape;
      ad::Var loss;
      try {
        loss = ad::bce_with_logits(LatteModel::logits(tape, ps, model.config(), batch), labels);
      } catch (const NumericalError& e) {
        ps = *best;
        throw TrainingDiverged("epoch " + std::to_string(epoch) + ": " + e.what(), best);
      }
      const double value = loss.value()(0, 0);
      if (!std::isfinite(value)) {
        ps = *best;
        throw TrainingDiverged("non-finite training loss at epoch " + std::to_string(epoch), best);
      }
      if (epoch == 0 && begin == 0) {
        result.first_batch_loss = value;
        for (const Example* e : batch) result.first_batch_ids.push_back(e->id);
      }
      tape.backward(loss);
      opt.step(ps, lr);
      loss_sum += value * static_cast<double>(batch.size());
      seen += batch.size();
    }

    EpochLog entry{epoch, lr, loss_sum / static_cast<double>(seen), evaluate(model, val_set, workers)};
    result.log.push_back(entry);
    if (entry.val.accuracy > best_acc) {
      best_acc = entry.val.accuracy;
      *best = ps;
      result.best_epoch = epoch;
      result.best_val = entry.val;
      stale = 0;
    } else if (++stale >= config.patience) {
      result.early_stopped = epoch + 1 < config.max_epochs;
      break;
    }
  }
  ps = *best;
  return result;
}

Metrics evaluate(const LatteModel& model, std::span<const Example> test_set, int workers) {
  if (test_set.empty()) throw InvalidArgument("evaluate: empty test set");
  return compute_metrics(model.predict(test_set, workers), test_set);
}

const EvalRecord* EvalReport::find(const std::string& train, const std::string& test) const {
  for (const EvalRecord& r : records) {
    if (r.train_source == train && r.test_source == test) return &r;
  }
  return nullptr;
}

std::map<std::string, double> EvalReport::row_means() const {
  std::map<std::string, double> out;
  for (const auto& tr : train_sources) {
    double sum = 0;
    int k = 0;
    for (const auto& te : test_sources) {
      if (const EvalRecord* r = find(tr, te)) {
        sum += r->metrics.accuracy;
        ++k;
      }
    }
    if (k > 0) out[tr] = sum / k;
  }
  return out;
}

std::map<std::string, double> EvalReport::column_means() const {
  std::map<std::string, double> out;
  for (const auto& te : test_sources) {
    double sum = 0;
    int k = 0;
    for (const auto& tr : train_sources) {
      if (const EvalRecord* r = find(tr, te)) {
        sum += r->metrics.accuracy;
        ++k;
      }
    }
    if (k > 0) out[te] = sum / k;
  }
  return out;
}

namespace {
std::optional<double> mean_where(const std::vector<EvalRecord>& records, bool diagonal) {
  double sum = 0;
  int k = 0;
  for (const EvalRecord& r : records) {
    if ((r.train_source == r.test_source) == diagonal) {
      sum += r.metrics.accuracy;
      ++k;
    }
  }
  if (k == 0) return std::nullopt;
  return sum / k;
}
}  // namespace

std::optional<double> EvalReport::diagonal_mean() const { return mean_where(records, true); }
std::optional<double> EvalReport::off_diagonal_mean() const { return mean_where(records, false); }

nlohmann::json EvalReport::to_json() const {
  nlohmann::json cells = nlohmann::json::array();
  for (const EvalRecord& r : records) {
    cells.push_back({{"train_source", r.train_source},
                     {"test_source", r.test_source},
                     {"perturbation", r.perturbation},
                     {"accuracy", r.metrics.accuracy},
                     {"average_precision", r.metrics.average_precision},
                     {"count", r.metrics.count}});
  }
  auto opt = [](std::optional<double> v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"train_sources", train_sources}, {"test_sources", test_sources},
          {"records", cells},               {"row_means", row_means()},
          {"column_means", column_means()}, {"diagonal_mean", opt(diagonal_mean())},
          {"off_diagonal_mean", opt(off_diagonal_mean())}, {"gaps", gaps}};
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "train\\test";
  for (const auto& te : test_sources) os << ',' << te;
  os << ",mean\n";
  const auto rows = row_means();
  const auto cols = column_means();
  for (const auto& tr : train_sources) {
    os << tr;
    for (const auto& te : test_sources) {
      os << ',';
      if (const EvalRecord* r = find(tr, te)) os << nlohmann::json(r->metrics.accuracy).dump();
    }
    os << ',';
    if (rows.count(tr)) os << nlohmann::json(rows.at(tr)).dump();
    os << '\n';
  }
  os << "mean";
  for (const auto& te : test_sources) {
    os << ',';
    if (cols.count(te)) os << nlohmann::json(cols.at(te)).dump();
  }
  os << ",\n";
  return os.str();
}

EvalReport cross_matrix(const std::map<std::string, const LatteModel*>& models,
                        const std::map<std::string, std::vector<Example>>& test_sets, int workers) {
  std::set<std::string> trains;
  std::set<std::string> tests;
  for (const auto& [k, v] : models) trains.insert(k);
  for (const auto& [k, v] : test_sets) tests.insert(k);
  // Sources named only on one side still get a row/column so gaps are visible.
  std::set<std::string> all = trains;
  all.insert(tests.begin(), tests.end());
  EvalReport report;
  report.train_sources.assign(all.begin(), all.end());
  report.test_sources.assign(all.begin(), all.end());
  for (const auto& tr : report.train_sources) {
    for (const auto& te : report.test_sources) {
      const auto m = models.find(tr);
      const auto t = test_sets.find(te);
      if (m == models.end() || m->second == nullptr) {
        report.gaps.push_back(tr + "->" + te + ": no checkpoint for " + tr);
      } else if (t == test_sets.end() || t->second.empty()) {
        report.gaps.push_back(tr + "->" + te + ": no test set for " + te);
      } else {
        report.records.push_back({tr, te, "none", evaluate(*m->second, t->second, workers)});
      }
    }
  }
  return report;
}

}  // namespace latte
