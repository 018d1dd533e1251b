#pragma once

// Pixel-level inter-annotator agreement (Cohen's kappa and Dice, plain and
// weighted by p = confidence x expertise) and the three-step curation
// protocol: pairwise agreement per lesion type, removal of annotators who
// disagree with most peers, image-level keep/discard.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "retina/error.hpp"
#include "retina/format.hpp"
#include "retina/image.hpp"

namespace retina {

/// 2x2 agreement table. A: both foreground, B: only the first, C: only the
/// second, D: both background. Integral for plain counts, real when weighted.
struct ConfusionSums {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
  double d = 0.0;

  [[nodiscard]] double total() const noexcept { return a + b + c + d; }
  friend bool operator==(const ConfusionSums&, const ConfusionSums&) = default;
};

namespace detail {

inline void check_same_shape(const BinaryMask& i, const BinaryMask& j) {
  if (!i.same_shape(j))
    throw DimensionMismatch("masks differ in size: " + std::to_string(i.width()) + "x" + std::to_string(i.height()) +
                            " vs " + std::to_string(j.width()) + "x" + std::to_string(j.height()));
}

inline void check_weight(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("pixel weight p must lie in [0,1], got " + format_double(p));
}

}  // namespace detail

[[nodiscard]] inline ConfusionSums confusion(const BinaryMask& i, const BinaryMask& j) {
  detail::check_same_shape(i, j);
  std::size_t a = 0, b = 0, c = 0, d = 0;
  const auto bi = i.bits(), bj = j.bits();
  for (std::size_t k = 0; k < bi.size(); ++k) {
    const bool fi = bi[k] != 0, fj = bj[k] != 0;
    if (fi && fj) {
      ++a;
    } else if (fi) {
      ++b;
    } else if (fj) {
      ++c;
    } else {
      ++d;
    }
  }
  return {static_cast<double>(a), static_cast<double>(b), static_cast<double>(c), static_cast<double>(d)};
}

/// Weighted sums with a constant foreground weight per mask:
/// A = sum p_i p_j over joint foreground, B = sum p_i over i-only,
/// C = sum p_j over j-only, D = count of joint background. A pixel counts as
/// foreground for a mask only when the mask is set and its weight is > 0.
[[nodiscard]] inline ConfusionSums weighted_confusion(const BinaryMask& i, double p_i, const BinaryMask& j, double p_j) {
  detail::check_same_shape(i, j);
  detail::check_weight(p_i);
  detail::check_weight(p_j);
  const auto plain = confusion(i, j);
  // A pixel with p = 0 behaves as background for that annotator.
  const bool zi = p_i == 0.0, zj = p_j == 0.0;
  if (!zi && !zj) return {plain.a * p_i * p_j, plain.b * p_i, plain.c * p_j, plain.d};
  if (zi && zj) return {0.0, 0.0, 0.0, plain.total()};
  if (zi) return {0.0, 0.0, (plain.a + plain.c) * p_j, plain.b + plain.d};
  return {0.0, (plain.a + plain.b) * p_i, 0.0, plain.c + plain.d};
}

[[nodiscard]] inline ConfusionSums weighted_confusion(const Annotation& i, const Annotation& j) {
  i.validate();
  j.validate();
  return weighted_confusion(i.mask, i.weight(), j.mask, j.weight());
}

struct KappaResult {
  double value = 0.0;
  bool degenerate = false;  ///< chance agreement was 1 (both empty or both full)
};

/// K = (P - Pe) / (1 - Pe), P = (A+D)/N,
/// Pe = ((A+B)(A+C) + (C+D)(B+D)) / N^2.
/// When Pe = 1 the ratio is 0/0; identical judgments then score 1, anything
/// else 0, and the result is flagged degenerate.
[[nodiscard]] inline KappaResult cohen_kappa(const ConfusionSums& s) {
  const double n = s.total();
  if (!(n > 0.0)) throw InvalidArgument("kappa needs a nonempty table");
  // Pe = 1 exactly when both raters put all mass on the same side.
  if (s.b == 0.0 && s.c == 0.0 && (s.a == 0.0 || s.d == 0.0)) return {1.0, true};
  const double p = (s.a + s.d) / n;
  const double pe = ((s.a + s.b) * (s.a + s.c) + (s.c + s.d) * (s.b + s.d)) / (n * n);
  if (pe >= 1.0) return {0.0, true};
  return {(p - pe) / (1.0 - pe), false};
}

/// 2A / (2A + B + C); 1 when both masks are empty.
[[nodiscard]] inline double dice(const ConfusionSums& s) {
  const double den = 2.0 * s.a + s.b + s.c;
  return den > 0.0 ? 2.0 * s.a / den : 1.0;
}

[[nodiscard]] inline double dsc(const BinaryMask& i, const BinaryMask& j) { return dice(confusion(i, j)); }

[[nodiscard]] inline double weighted_dsc(const Annotation& i, const Annotation& j) {
  return dice(weighted_confusion(i, j));
}

/// All four pairwise metrics for one pair of annotations.
struct PairMetrics {
  double kappa = 0.0;
  double w_kappa = 0.0;
  double dsc = 0.0;
  double w_dsc = 0.0;
  bool degenerate = false;
};

[[nodiscard]] inline PairMetrics pair_metrics(const Annotation& i, const Annotation& j) {
  const auto plain = confusion(i.mask, j.mask);
  const auto weighted = weighted_confusion(i, j);
  const auto k = cohen_kappa(plain);
  const auto wk = cohen_kappa(weighted);
  return {k.value, wk.value, dice(plain), dice(weighted), k.degenerate || wk.degenerate};
}

struct ProtocolThresholds {
  double pairwise_low = 0.4;
  std::optional<int> outlier_count;  ///< default ceil((n-1)/2) for n annotators
  double overall_discard = 0.4;
  double per_lesion_slight = 0.2;  ///< reporting band only

  void validate() const {
    for (double t : {pairwise_low, overall_discard, per_lesion_slight})
      if (!(t >= -1.0 && t <= 1.0)) throw InvalidArgument("agreement thresholds must lie in [-1,1]");
    if (outlier_count && *outlier_count < 1) throw InvalidArgument("outlier_count must be >= 1");
  }

  [[nodiscard]] int outlier_count_for(std::size_t annotators) const {
    if (outlier_count) return *outlier_count;
    const int n = static_cast<int>(annotators);
    return std::max(1, n / 2);  // ceil((n-1)/2)
  }
};

/// Symmetric matrix of pairwise metrics among the annotators of one lesion type.
struct PairwiseMatrix {
  LesionType lesion = LesionType::EX;
  std::vector<std::string> annotators;              ///< sorted ids
  std::vector<std::vector<PairMetrics>> metrics;    ///< [i][j], diagonal unused

  /// Mean over the upper triangle of the chosen metric.
  template <class Pick>
  [[nodiscard]] double average(Pick pick) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < annotators.size(); ++i)
      for (std::size_t j = i + 1; j < annotators.size(); ++j) {
        sum += pick(metrics[i][j]);
        ++n;
      }
    return n ? sum / static_cast<double>(n) : 0.0;
  }

  [[nodiscard]] double average_w_kappa() const {
    return average([](const PairMetrics& m) { return m.w_kappa; });
  }

  [[nodiscard]] bool any_degenerate() const {
    for (std::size_t i = 0; i < annotators.size(); ++i)
      for (std::size_t j = i + 1; j < annotators.size(); ++j)
        if (metrics[i][j].degenerate) return true;
    return false;
  }
};

/// Pairwise matrix for one lesion type, or nothing when fewer than two
/// annotators marked that type. Throws if one annotator appears twice.
[[nodiscard]] inline std::optional<PairwiseMatrix> pairwise_matrix(const std::vector<Annotation>& annotations,
                                                                   LesionType lesion) {
  std::vector<const Annotation*> sel;
  for (const auto& a : annotations)
    if (a.lesion == lesion) sel.push_back(&a);
  std::sort(sel.begin(), sel.end(), [](auto* x, auto* y) { return x->annotator_id < y->annotator_id; });
  for (std::size_t k = 1; k < sel.size(); ++k)
    if (sel[k]->annotator_id == sel[k - 1]->annotator_id)
      throw InvalidArgument("annotator '" + sel[k]->annotator_id + "' has two " + std::string(to_string(lesion)) +
                            " annotations");
  if (sel.size() < 2) return std::nullopt;
  PairwiseMatrix m;
  m.lesion = lesion;
  const auto n = sel.size();
  m.metrics.assign(n, std::vector<PairMetrics>(n));
  for (auto* a : sel) m.annotators.push_back(a->annotator_id);
  for (std::size_t i = 0; i < n; ++i) {
    m.metrics[i][i] = {1.0, 1.0, 1.0, 1.0, false};
    for (std::size_t j = i + 1; j < n; ++j) {
      m.metrics[i][j] = pair_metrics(*sel[i], *sel[j]);
      m.metrics[j][i] = m.metrics[i][j];
    }
  }
  return m;
}

/// Annotators whose number of low-agreement peers exceeds the outlier count.
/// Pair agreement is the mean weighted kappa over the lesion types both
/// annotators marked. At most n-2 annotators are removed; when more qualify,
/// those with the most low peers (then lowest mean agreement, then id) go first.
[[nodiscard]] inline std::vector<std::string> detect_outliers(const std::vector<PairwiseMatrix>& matrices,
                                                              const ProtocolThresholds& t = {}) {
  t.validate();
  std::set<std::string> ids;
  std::map<std::pair<std::string, std::string>, std::pair<double, int>> pair_acc;
  for (const auto& m : matrices) {
    for (std::size_t i = 0; i < m.annotators.size(); ++i) {
      ids.insert(m.annotators[i]);
      for (std::size_t j = i + 1; j < m.annotators.size(); ++j) {
        auto& acc = pair_acc[{m.annotators[i], m.annotators[j]}];
        acc.first += m.metrics[i][j].w_kappa;
        acc.second += 1;
      }
    }
  }
  const std::size_t n = ids.size();
  if (n <= 2) return {};
  const int limit = t.outlier_count_for(n);
  struct Candidate {
    std::string id;
    int low = 0;
    double mean = 0.0;
  };
  std::map<std::string, Candidate> stats;
  std::map<std::string, int> peers;
  for (const auto& id : ids) stats[id].id = id;
  for (const auto& [key, acc] : pair_acc) {
    const double mean = acc.first / acc.second;
    for (const auto& who : {key.first, key.second}) {
      stats[who].mean += mean;
      ++peers[who];
      if (mean < t.pairwise_low) ++stats[who].low;
    }
  }
  std::vector<Candidate> flagged;
  for (auto& [id, c] : stats) {
    if (peers[id] > 0) c.mean /= peers[id];
    if (c.low > limit) flagged.push_back(c);
  }
  std::sort(flagged.begin(), flagged.end(), [](const Candidate& a, const Candidate& b) {
    if (a.low != b.low) return a.low > b.low;
    if (a.mean != b.mean) return a.mean < b.mean;
    return a.id < b.id;
  });
  if (flagged.size() > n - 2) flagged.resize(n - 2);
  std::vector<std::string> out;
  for (const auto& c : flagged) out.push_back(c.id);
  std::sort(out.begin(), out.end());
  return out;
}

enum class Verdict { keep, discard, insufficient };

[[nodiscard]] inline std::string_view to_string(Verdict v) noexcept {
  switch (v) {
    case Verdict::keep: return "keep";
    case Verdict::discard: return "discard";
    case Verdict::insufficient: return "insufficient";
  }
  return "?";
}

[[nodiscard]] inline Verdict verdict_for_score(double score, const ProtocolThresholds& t = {}) {
  return score < t.overall_discard ? Verdict::discard : Verdict::keep;
}

struct OverallAgreement {
  std::optional<double> score;  ///< mean over lesion types of the pairwise-average weighted kappa
  Verdict verdict = Verdict::insufficient;
};

/// Image-level score over the annotations that survived outlier removal.
[[nodiscard]] inline OverallAgreement overall_agreement(const std::vector<Annotation>& remaining,
                                                        const ProtocolThresholds& t = {}) {
  t.validate();
  double sum = 0.0;
  int types = 0;
  for (auto lesion : kAllLesions) {
    if (auto m = pairwise_matrix(remaining, lesion)) {
      sum += m->average_w_kappa();
      ++types;
    }
  }
  if (types == 0) return {std::nullopt, Verdict::insufficient};
  const double score = sum / types;
  return {score, verdict_for_score(score, t)};
}

struct AgreementRow {
  LesionType lesion = LesionType::EX;
  double kappa = 0.0;
  double w_kappa = 0.0;
  double dsc = 0.0;
  double w_dsc = 0.0;
  bool degenerate = false;
};

struct AgreementReport {
  std::string image_id;
  std::vector<AgreementRow> rows;  ///< lesion types with >= 2 remaining annotators, fixed EX/HA/MA/SE order
  std::optional<AgreementRow> average;
  std::vector<std::string> discarded_annotators;
  std::optional<double> score;
  Verdict verdict = Verdict::insufficient;
};

/// Runs all three protocol steps for one image.
[[nodiscard]] inline AgreementReport report(const std::string& image_id, const std::vector<Annotation>& annotations,
                                            const ProtocolThresholds& t = {}) {
  t.validate();
  for (const auto& a : annotations) a.validate();
  AgreementReport r;
  r.image_id = image_id;

  std::vector<PairwiseMatrix> first_pass;
  for (auto lesion : kAllLesions)
    if (auto m = pairwise_matrix(annotations, lesion)) first_pass.push_back(std::move(*m));
  r.discarded_annotators = detect_outliers(first_pass, t);

  std::vector<Annotation> remaining;
  for (const auto& a : annotations)
    if (!std::binary_search(r.discarded_annotators.begin(), r.discarded_annotators.end(), a.annotator_id))
      remaining.push_back(a);

  for (auto lesion : kAllLesions) {
    auto m = pairwise_matrix(remaining, lesion);
    if (!m) continue;
    AgreementRow row;
    row.lesion = lesion;
    row.kappa = m->average([](const PairMetrics& x) { return x.kappa; });
    row.w_kappa = m->average([](const PairMetrics& x) { return x.w_kappa; });
    row.dsc = m->average([](const PairMetrics& x) { return x.dsc; });
    row.w_dsc = m->average([](const PairMetrics& x) { return x.w_dsc; });
    row.degenerate = m->any_degenerate();
    r.rows.push_back(row);
  }
  if (!r.rows.empty()) {
    AgreementRow avg;
    for (const auto& row : r.rows) {
      avg.kappa += row.kappa;
      avg.w_kappa += row.w_kappa;
      avg.dsc += row.dsc;
      avg.w_dsc += row.w_dsc;
      avg.degenerate = avg.degenerate || row.degenerate;
    }
    const auto n = static_cast<double>(r.rows.size());
    avg.kappa /= n;
    avg.w_kappa /= n;
    avg.dsc /= n;
    avg.w_dsc /= n;
    r.average = avg;
    r.score = avg.w_kappa;
    r.verdict = verdict_for_score(avg.w_kappa, t);
  }
  return r;
}

[[nodiscard]] inline nlohmann::json report_to_json(const AgreementReport& r) {
  auto row_json = [](const AgreementRow& row) {
    return nlohmann::json{{"kappa", row.kappa}, {"w_kappa", row.w_kappa}, {"dsc", row.dsc},
                          {"w_dsc", row.w_dsc}, {"degenerate", row.degenerate}};
  };
  nlohmann::json j;
  j["image_id"] = r.image_id;
  auto rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    auto rj = row_json(row);
    rj["lesion"] = std::string(to_string(row.lesion));
    rows.push_back(std::move(rj));
  }
  j["rows"] = std::move(rows);
  j["average"] = r.average ? row_json(*r.average) : nlohmann::json(nullptr);
  j["discarded_annotators"] = r.discarded_annotators;
  j["score"] = r.score ? nlohmann::json(*r.score) : nlohmann::json(nullptr);
  j["verdict"] = std::string(to_string(r.verdict));
  return j;
}

/// Plain-text table: Lesion, Cohen Kappa, W Cohen Kappa, DSC, Weighted DSC.
[[nodiscard]] inline std::string report_to_text(const AgreementReport& r) {
  auto cell = [](double v) {
    std::string s = format_fixed(v, 2);
    if (s.rfind("0.", 0) == 0) s.erase(0, 1);
    if (s.rfind("-0.", 0) == 0) s.erase(1, 1);
    return s;
  };
  auto line = [&](std::string label, const AgreementRow& row) {
    label.resize(8, ' ');
    std::string out = label;
    for (double v : {row.kappa, row.w_kappa, row.dsc, row.w_dsc}) {
      auto c = cell(v);
      out += std::string(c.size() < 14 ? 14 - c.size() : 1, ' ') + c;
    }
    if (row.degenerate) out += "  (degenerate)";
    return out + "\n";
  };
  std::string out = "image " + r.image_id + "\n";
  out += "Lesion     Cohen Kappa W Cohen Kappa           DSC  Weighted DSC\n";
  for (const auto& row : r.rows) out += line(std::string(to_string(row.lesion)), row);
  if (r.average) out += line("Average", *r.average);
  out += "discarded annotators: ";
  if (r.discarded_annotators.empty()) out += "none";
  for (std::size_t i = 0; i < r.discarded_annotators.size(); ++i)
    out += (i ? ", " : "") + r.discarded_annotators[i];
  out += "\nverdict: " + std::string(to_string(r.verdict)) + "\n";
  return out;
}

}  // namespace retina
