#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fccl/data.hpp"
#include "fccl/losses.hpp"
#include "fccl/models.hpp"

namespace fccl {

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
inline double accuracy_from_logits(const Matrix& z, std::span<const int> labels) {
  if (z.rows() == 0) throw ParameterError("accuracy: empty test set");
  if (labels.size() != z.rows()) throw ShapeError("accuracy: label count does not match rows");
  std::size_t correct = 0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (pred == labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(z.rows());
}

inline double intra_accuracy(const ClientModel& model, const DomainDataset& domain) {
  if (domain.test_x.rows() == 0) throw ParameterError("intra_accuracy: empty test set");
  return accuracy_from_logits(forward(model, domain.test_x).z, domain.test_y);
}

/// Equal-weight mean of per-domain accuracy over every domain except `own_domain`.
inline double inter_accuracy(const ClientModel& model, std::span<const DomainDataset> domains, std::size_t own_domain) {
  if (domains.size() < 2) throw ParameterError("inter_accuracy: need at least 2 domains");
  double total = 0.0;
  std::size_t counted = 0;
  for (const auto& d : domains) {
    if (d.domain_id == own_domain) continue;
    total += intra_accuracy(model, d);
    ++counted;
  }
  if (counted != domains.size() - 1) throw ParameterError("inter_accuracy: own domain not found exactly once");
  return total / static_cast<double>(counted);
}

enum class Phase { PostCollab, PostLocal };

inline const char* to_string(Phase p) { return p == Phase::PostCollab ? "post-collab" : "post-local"; }

inline Phase phase_from_string(const std::string& s) {
  if (s == "post-collab") return Phase::PostCollab;
  if (s == "post-local") return Phase::PostLocal;
  throw ParameterError("unknown phase '" + s + "'");
}

struct MetricsRecord {
  int epoch = 0;
  Phase phase = Phase::PostLocal;
  std::vector<double> intra_acc;  // per client
  std::vector<double> inter_acc;  // per client
  std::vector<double> loss;       // per client, mean training loss of the phase just run
  double intra_avg = 0.0;
  double inter_avg = 0.0;
};

using MetricsLog = std::vector<MetricsRecord>;

inline double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline MetricsRecord evaluate(std::span<const ClientModel* const> models, std::span<const DomainDataset> domains,
                              int epoch, Phase phase, std::vector<double> loss) {
  MetricsRecord rec;
  rec.epoch = epoch;
  rec.phase = phase;
  for (std::size_t i = 0; i < models.size(); ++i) {
    rec.intra_acc.push_back(intra_accuracy(*models[i], domains[i]));
    rec.inter_acc.push_back(inter_accuracy(*models[i], domains, domains[i].domain_id));
  }
  rec.loss = std::move(loss);
  rec.intra_avg = mean(rec.intra_acc);
  rec.inter_avg = mean(rec.inter_acc);
  return rec;
}

struct Summary {
  double intra_avg = 0.0;
  double inter_avg = 0.0;
  std::size_t epochs_used = 0;
};

/// Mean of the last `window` post-local records with epoch <= `up_to_epoch`.
inline Summary summarize(const MetricsLog& log, std::size_t window = 3, int up_to_epoch = -1) {
  std::vector<const MetricsRecord*> picked;
  for (const auto& r : log) {
    if (r.phase != Phase::PostLocal) continue;
    if (up_to_epoch >= 0 && r.epoch > up_to_epoch) continue;
    picked.push_back(&r);
  }
  Summary s;
  const std::size_t n = std::min(window, picked.size());
  for (std::size_t i = picked.size() - n; i < picked.size(); ++i) {
    s.intra_avg += picked[i]->intra_avg;
    s.inter_avg += picked[i]->inter_avg;
  }
  if (n > 0) {
    s.intra_avg /= static_cast<double>(n);
    s.inter_avg /= static_cast<double>(n);
  }
  s.epochs_used = n;
  return s;
}

/// Inter-domain accuracy lost during each epoch's local phase
/// (post-collab minus post-local of the same epoch).
inline std::vector<double> forgetting_gaps(const MetricsLog& log) {
  std::vector<double> gaps;
  for (const auto& local : log) {
    if (local.phase != Phase::PostLocal || local.epoch < 1) continue;
    for (const auto& collab : log) {
      if (collab.phase == Phase::PostCollab && collab.epoch == local.epoch) {
        gaps.push_back(collab.inter_avg - local.inter_avg);
        break;
      }
    }
  }
  return gaps;
}

inline double forgetting_gap_of(const MetricsLog& log, const MetricsRecord& local) {
  if (local.phase != Phase::PostLocal) return 0.0;
  for (const auto& collab : log)
    if (collab.phase == Phase::PostCollab && collab.epoch == local.epoch) return collab.inter_avg - local.inter_avg;
  return 0.0;
}

// Metrics CSV columns, in order:
//   epoch, phase, intra_<i>..., inter_<i>..., loss_<i>..., intra_avg, inter_avg,
//   intra_avg_last3, inter_avg_last3, forgetting_gap
// Accuracies use 4 decimals, losses %.6g. The *_last3 columns average the last
// three post-local records up to the row's epoch; forgetting_gap is filled on
// post-local rows that have a matching post-collab row, 0 otherwise.
inline std::string metrics_csv_header(std::size_t clients) {
  std::string h = "epoch,phase";
  for (const char* kind : {"intra_", "inter_", "loss_"})
    for (std::size_t i = 0; i < clients; ++i) h += "," + std::string(kind) + std::to_string(i);
  h += ",intra_avg,inter_avg,intra_avg_last3,inter_avg_last3,forgetting_gap";
  return h;
}

inline void write_metrics_csv(const MetricsLog& log, std::ostream& os, std::size_t clients) {
  os << metrics_csv_header(clients) << '\n';
  char buf[64];
  auto acc = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  for (const auto& r : log) {
    os << r.epoch << ',' << to_string(r.phase);
    for (double v : r.intra_acc) os << ',' << acc(v);
    for (double v : r.inter_acc) os << ',' << acc(v);
    for (double v : r.loss) {
      std::snprintf(buf, sizeof buf, "%.6g", v);
      os << ',' << buf;
    }
    const Summary s = summarize(log, 3, r.epoch);
    os << ',' << acc(r.intra_avg) << ',' << acc(r.inter_avg) << ',' << acc(s.intra_avg) << ',' << acc(s.inter_avg)
       << ',' << acc(forgetting_gap_of(log, r)) << '\n';
  }
}

inline void write_metrics_csv(const MetricsLog& log, const std::string& path) {
  const std::size_t clients = log.empty() ? 0 : log.front().intra_acc.size();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_metrics_csv(log, os, clients);
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline MetricsLog read_metrics_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParameterError("metrics csv: missing header");
  std::size_t cols = 1;
  for (char c : line) cols += c == ',';
  if (cols < 7 || (cols - 7) % 3 != 0) throw ParameterError("metrics csv: unexpected column count");
  const std::size_t clients = (cols - 7) / 3;
  MetricsLog log;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != cols) throw ParameterError("metrics csv: ragged row");
    MetricsRecord r;
    r.epoch = std::stoi(f[0]);
    r.phase = phase_from_string(f[1]);
    std::size_t k = 2;
    for (auto* vec : {&r.intra_acc, &r.inter_acc, &r.loss})
      for (std::size_t i = 0; i < clients; ++i) vec->push_back(std::stod(f[k++]));
    r.intra_avg = std::stod(f[k++]);
    r.inter_avg = std::stod(f[k++]);
    log.push_back(std::move(r));
  }
  return log;
}

// Correlation dump: C lines of C space-separated values, "%.6f".
inline void dump_correlation_matrix(const CorrelationMatrix& corr, std::ostream& os) {
  char buf[32];
  for (std::size_t u = 0; u < corr.m.rows(); ++u) {
    for (std::size_t v = 0; v < corr.m.cols(); ++v) {
      std::snprintf(buf, sizeof buf, "%.6f", corr.m(u, v));
      os << (v ? " " : "") << buf;
    }
    os << '\n';
  }
}

inline void dump_correlation_matrix(const CorrelationMatrix& corr, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  dump_correlation_matrix(corr, os);
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline Matrix read_correlation_matrix(std::istream& is) {
  std::vector<double> values;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::size_t n = 0;
    double v = 0.0;
    while (ss >> v) {
      values.push_back(v);
      ++n;
    }
    if (rows == 0) cols = n;
    if (n != cols) throw ParameterError("correlation dump: ragged row");
    ++rows;
  }
  return Matrix(rows, cols, std::move(values));
}

}  // namespace fccl
