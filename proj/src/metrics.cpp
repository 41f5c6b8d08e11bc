#include "cpt/metrics.hpp"

#include <sstream>
#include <stdexcept>

namespace cpt {

AccuracyMatrix::AccuracyMatrix(int t) : t_(t) {
    if (t < 1) throw std::runtime_error("accuracy matrix needs at least one task");
}

void AccuracyMatrix::set(int j, int i, double value) {
    if (j < 1 || j > t_ || i < 1 || i > t_)
        throw std::runtime_error("accuracy matrix index (" + std::to_string(j) + "," +
                                 std::to_string(i) + ") outside 1.." + std::to_string(t_));
    if (!(value >= 0.0 && value <= 1.0))
        throw std::runtime_error("accuracy " + std::to_string(value) + " outside [0,1]");
    entries_[{j, i}] = value;
}

bool AccuracyMatrix::has(int j, int i) const { return entries_.count({j, i}) > 0; }

double AccuracyMatrix::get(int j, int i) const {
    auto it = entries_.find({j, i});
    if (it == entries_.end())
        throw std::runtime_error("accuracy matrix entry (" + std::to_string(j) + "," +
                                 std::to_string(i) + ") was never evaluated");
    return it->second;
}

nlohmann::json AccuracyMatrix::to_json() const {
    nlohmann::json out;
    out["tasks"] = t_;
    nlohmann::json e = nlohmann::json::object();
    for (const auto& [key, v] : entries_)
        e[std::to_string(key.first) + "," + std::to_string(key.second)] = v;
    out["entries"] = std::move(e);
    return out;
}

AccuracyMatrix AccuracyMatrix::from_json(const nlohmann::json& j) {
    AccuracyMatrix m(j.at("tasks").get<int>());
    for (const auto& [key, v] : j.at("entries").items()) {
        const size_t comma = key.find(',');
        if (comma == std::string::npos)
            throw std::runtime_error("accuracy matrix key '" + key + "' is not 'j,i'");
        m.set(std::stoi(key.substr(0, comma)), std::stoi(key.substr(comma + 1)),
              v.get<double>());
    }
    return m;
}

std::string AccuracyMatrix::to_csv() const {
    std::ostringstream out;
    out << "after_task";
    for (int i = 1; i <= t_; ++i) out << ",task_" << i;
    out << "\n";
    for (int j = 1; j <= t_; ++j) {
        out << j;
        for (int i = 1; i <= t_; ++i) {
            out << ",";
            if (has(j, i)) out << get(j, i);
        }
        out << "\n";
    }
    return out.str();
}

double joint_goal_accuracy(const std::vector<ValueMap>& predictions,
                           const std::vector<ValueMap>& golds) {
    if (predictions.size() != golds.size())
        throw std::runtime_error("joint goal accuracy: " + std::to_string(predictions.size()) +
                                 " predictions vs " + std::to_string(golds.size()) + " golds");
    if (predictions.empty()) return 0.0;
    auto at = [](const ValueMap& m, const std::string& k) {
        auto it = m.find(k);
        return normalize_value(it == m.end() ? "None" : it->second);
    };
    int hits = 0;
    for (size_t e = 0; e < predictions.size(); ++e) {
        bool all = true;
        for (const auto& [k, v] : golds[e])
            if (at(predictions[e], k) != normalize_value(v)) {
                all = false;
                break;
            }
        if (all)
            for (const auto& [k, v] : predictions[e])
                if (at(golds[e], k) != normalize_value(v)) {
                    all = false;
                    break;
                }
        if (all) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

double avg_jga(const AccuracyMatrix& m) {
    const int t = m.tasks();
    double sum = 0.0;
    for (int i = 1; i <= t; ++i) sum += m.get(t, i);  // throws when incomplete
    return sum / t;
}

std::optional<double> fwt(const AccuracyMatrix& m) {
    const int t = m.tasks();
    if (t < 2) return std::nullopt;
    double sum = 0.0;
    for (int i = 2; i <= t; ++i) {
        if (!m.has(i - 1, i)) return std::nullopt;
        sum += m.get(i - 1, i);
    }
    return sum / (t - 1);
}

std::optional<double> bwt(const AccuracyMatrix& m) {
    const int t = m.tasks();
    if (t < 2) return std::nullopt;
    double sum = 0.0;
    for (int i = 1; i <= t - 1; ++i) {
        if (!m.has(t, i) || !m.has(i, i)) return std::nullopt;
        sum += m.get(t, i) - m.get(i, i);
    }
    return sum / (t - 1);
}

}  // namespace cpt
