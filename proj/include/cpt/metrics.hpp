#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cpt/codec.hpp"
#include "json.hpp"

namespace cpt {

// a[j][i] = accuracy on task i measured after training j tasks, 1-based on
// both axes. Only the entries a run actually evaluates are stored.
class AccuracyMatrix {
  public:
    AccuracyMatrix() = default;
    explicit AccuracyMatrix(int t);

    int tasks() const { return t_; }
    void set(int j, int i, double value);
    bool has(int j, int i) const;
    double get(int j, int i) const;  // missing entry -> error

    const std::map<std::pair<int, int>, double>& entries() const { return entries_; }

    nlohmann::json to_json() const;
    static AccuracyMatrix from_json(const nlohmann::json& j);
    std::string to_csv() const;

  private:
    int t_ = 0;
    std::map<std::pair<int, int>, double> entries_;
};

// Fraction of examples whose predicted map matches the gold map on every
// slot after normalization; slots missing from either side count as "None".
double joint_goal_accuracy(const std::vector<ValueMap>& predictions,
                           const std::vector<ValueMap>& golds);

// (1/T) sum_i a[T][i]; throws when the final row is incomplete.
double avg_jga(const AccuracyMatrix& m);

// (1/(T-1)) sum_{i=2..T} a[i-1][i]; empty when T < 2 or the zero-shot
// entries were never evaluated (methods with no sequential connection).
std::optional<double> fwt(const AccuracyMatrix& m);

// (1/(T-1)) sum_{i=1..T-1} (a[T][i] - a[i][i]); empty when T < 2 or the
// needed entries are missing.
std::optional<double> bwt(const AccuracyMatrix& m);

}  // namespace cpt
