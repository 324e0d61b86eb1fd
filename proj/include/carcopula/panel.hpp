#pragma once

#include <cmath>
#include <limits>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "csv.hpp"
#include "error.hpp"

namespace carcopula {

using MissingMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

/// n regions x T years of positive observations; NaN marks a missing cell.
struct RegionalPanel {
  std::vector<std::string> regions;
  std::vector<std::string> years;
  Eigen::MatrixXd values;

  [[nodiscard]] int n() const { return static_cast<int>(values.rows()); }
  [[nodiscard]] int T() const { return static_cast<int>(values.cols()); }
  [[nodiscard]] bool is_missing(int i, int t) const { return std::isnan(values(i, t)); }

  [[nodiscard]] MissingMask missing_mask() const { return values.array().isNaN(); }

  [[nodiscard]] int missing_count() const { return static_cast<int>(missing_mask().count()); }

  /// Region indices missing in year t.
  [[nodiscard]] std::vector<int> missing_in_year(int t) const {
    std::vector<int> idx;
    for (int i = 0; i < n(); ++i)
      if (is_missing(i, t)) idx.push_back(i);
    return idx;
  }
};

/// Checks positivity, label uniqueness and shape; throws InputError naming
/// the first offending cell.
inline void validate_panel(const RegionalPanel& panel) {
  if (static_cast<int>(panel.regions.size()) != panel.n() || static_cast<int>(panel.years.size()) != panel.T())
    throw InputError("panel labels do not match the value matrix shape");
  std::set<std::string> seen(panel.regions.begin(), panel.regions.end());
  if (static_cast<int>(seen.size()) != panel.n()) throw InputError("panel region labels are not unique");
  for (int i = 0; i < panel.n(); ++i) {
    for (int t = 0; t < panel.T(); ++t) {
      const double v = panel.values(i, t);
      if (std::isnan(v)) continue;
      if (!(v > 0.0) || !std::isfinite(v))
        throw InputError("panel value at region '" + panel.regions[static_cast<std::size_t>(i)] + "', year " +
                         panel.years[static_cast<std::size_t>(t)] + " must be positive and finite, got " +
                         csv::format_double(v));
    }
  }
}

inline RegionalPanel make_panel(Eigen::MatrixXd values) {
  RegionalPanel p;
  p.values = std::move(values);
  for (int i = 0; i < p.n(); ++i) p.regions.push_back(std::to_string(i + 1));
  for (int t = 0; t < p.T(); ++t) p.years.push_back(std::to_string(t + 1));
  return p;
}

/// Wide CSV: header `region,<year>,...`, one row per region, empty cell = missing.
inline RegionalPanel read_panel_csv(const std::string& path) {
  auto rows = csv::read_file(path);
  if (rows.size() < 2) throw InputError("panel file '" + path + "' needs a header and at least one region row");
  const auto& header = rows.front();
  if (header.size() < 2) throw InputError("panel header must list at least one year");
  RegionalPanel p;
  for (std::size_t k = 1; k < header.size(); ++k) p.years.push_back(csv::trim(header[k]));
  const auto T = static_cast<Eigen::Index>(p.years.size());
  p.values.resize(static_cast<Eigen::Index>(rows.size() - 1), T);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (static_cast<Eigen::Index>(row.size()) != T + 1)
      throw InputError("panel row " + std::to_string(r + 1) + " has " + std::to_string(row.size()) +
                       " fields, expected " + std::to_string(T + 1));
    p.regions.push_back(csv::trim(row[0]));
    for (Eigen::Index t = 0; t < T; ++t) {
      const std::string cell = csv::trim(row[static_cast<std::size_t>(t + 1)]);
      const auto i = static_cast<Eigen::Index>(r - 1);
      if (cell.empty() || cell == "NA") {
        p.values(i, t) = kMissing;
      } else {
        p.values(i, t) = csv::parse_double(cell, "panel region '" + p.regions.back() + "', year " +
                                                     p.years[static_cast<std::size_t>(t)]);
      }
    }
  }
  validate_panel(p);
  return p;
}

inline void write_panel_csv(std::ostream& out, const RegionalPanel& panel) {
  csv::Row header{"region"};
  header.insert(header.end(), panel.years.begin(), panel.years.end());
  csv::write_row(out, header);
  for (int i = 0; i < panel.n(); ++i) {
    csv::Row row{panel.regions[static_cast<std::size_t>(i)]};
    for (int t = 0; t < panel.T(); ++t)
      row.push_back(panel.is_missing(i, t) ? std::string() : csv::format_double(panel.values(i, t)));
    csv::write_row(out, row);
  }
}

}  // namespace carcopula
