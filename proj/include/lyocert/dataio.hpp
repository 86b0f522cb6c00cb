#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lyocert/core.hpp"
#include "lyocert/rng.hpp"

namespace lyocert {

/// Formats a double as decimal text with 17 significant digits, which round
/// trips bit-exactly through strtod.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Uniformly sampled state trajectory. The derivative channel is optional:
/// xdot is either empty or holds one vector per sample.
struct Trajectory {
    double dt = 0.0;
    std::string source_id;
    std::vector<double> t;
    std::vector<Vec> x;
    std::vector<Vec> xdot;

    std::size_t size() const { return t.size(); }
    std::size_t dim() const { return x.empty() ? 0 : x.front().size(); }
    bool has_derivatives() const { return !xdot.empty(); }
};

/// Grid-spacing tolerance is relative to dt.
inline void validate_trajectory(const Trajectory& traj) {
    if (traj.size() < 2) throw std::invalid_argument("trajectory needs at least 2 samples");
    if (!(traj.dt > 0.0)) throw std::invalid_argument("trajectory dt must be > 0");
    const std::size_t n = traj.dim();
    if (n == 0) throw std::invalid_argument("trajectory state dimension must be >= 1");
    for (std::size_t k = 1; k < traj.size(); ++k) {
        if (std::abs((traj.t[k] - traj.t[k - 1]) - traj.dt) > 1e-9 * traj.dt)
            throw std::invalid_argument("non-uniform time grid at row " + std::to_string(k + 1));
    }
    for (const Vec& v : traj.x)
        if (v.size() != n) throw std::invalid_argument("inconsistent state dimension");
    if (!traj.xdot.empty() && traj.xdot.size() != traj.size())
        throw std::invalid_argument("derivative channel must cover every sample or none");
}

enum class Role { train, test };

struct Dataset {
    std::vector<Trajectory> trajectories;
    Role role = Role::train;

    std::size_t size() const { return trajectories.size(); }
    std::size_t dim() const { return trajectories.empty() ? 0 : trajectories.front().dim(); }
    std::size_t sample_count() const {
        std::size_t s = 0;
        for (const auto& tr : trajectories) s += tr.size();
        return s;
    }
    bool has_derivatives() const {
        return !trajectories.empty() &&
               std::all_of(trajectories.begin(), trajectories.end(),
                           [](const Trajectory& tr) { return tr.has_derivatives(); });
    }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    return cells;
}

inline double parse_cell(const std::string& cell, std::size_t row, std::size_t col) {
    const char* begin = cell.c_str();
    char* end = nullptr;
    double v = std::strtod(begin, &end);
    while (end && *end == ' ') ++end;
    if (end == begin || (end && *end != '\0'))
        throw std::invalid_argument("non-numeric cell at row " + std::to_string(row) +
                                    ", column " + std::to_string(col + 1) + ": '" + cell + "'");
    return v;
}

}  // namespace detail

/// Reads the CSV trajectory format: header `t,x0,...,x{n-1}[,dx0,...,dx{n-1}]`,
/// one sample per line, `.` decimal separator. Row numbers in error messages
/// are 1-based over the data rows.
inline Trajectory load_trajectory(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open trajectory file: " + path.string());

    std::string line;
    if (!std::getline(in, line)) throw std::invalid_argument("empty trajectory file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::vector<std::string> header = detail::split_csv_line(line);
    if (header.empty() || header[0] != "t")
        throw std::invalid_argument("malformed header: first column must be 't'");

    std::size_t n = 0;
    while (1 + n < header.size() && header[1 + n] == "x" + std::to_string(n)) ++n;
    if (n == 0) throw std::invalid_argument("malformed header: expected x0 after t");
    bool with_deriv = header.size() == 1 + 2 * n;
    if (with_deriv) {
        for (std::size_t i = 0; i < n; ++i)
            if (header[1 + n + i] != "dx" + std::to_string(i))
                throw std::invalid_argument("malformed header: expected dx" + std::to_string(i));
    } else if (header.size() != 1 + n) {
        throw std::invalid_argument("malformed header: unexpected column count");
    }

    Trajectory traj;
    traj.source_id = path.stem().string();
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        ++row;
        const std::vector<std::string> cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw std::invalid_argument("wrong cell count at row " + std::to_string(row));
        traj.t.push_back(detail::parse_cell(cells[0], row, 0));
        Vec xv(n), dv(n);
        for (std::size_t i = 0; i < n; ++i) xv[i] = detail::parse_cell(cells[1 + i], row, 1 + i);
        traj.x.push_back(std::move(xv));
        if (with_deriv) {
            for (std::size_t i = 0; i < n; ++i)
                dv[i] = detail::parse_cell(cells[1 + n + i], row, 1 + n + i);
            traj.xdot.push_back(std::move(dv));
        }
    }
    if (traj.size() < 2) throw std::invalid_argument("trajectory needs at least 2 samples");
    traj.dt = traj.t[1] - traj.t[0];
    validate_trajectory(traj);
    return traj;
}

/// Atomic write: the file appears under its final name only when complete.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write file: " + tmp.string());
        out << content;
    }
    std::filesystem::rename(tmp, path);
}

inline void save_trajectory(const Trajectory& traj, const std::filesystem::path& path) {
    validate_trajectory(traj);
    const std::size_t n = traj.dim();
    std::string out = "t";
    for (std::size_t i = 0; i < n; ++i) out += ",x" + std::to_string(i);
    if (traj.has_derivatives())
        for (std::size_t i = 0; i < n; ++i) out += ",dx" + std::to_string(i);
    out += "\n";
    for (std::size_t k = 0; k < traj.size(); ++k) {
        out += format_double(traj.t[k]);
        for (std::size_t i = 0; i < n; ++i) out += "," + format_double(traj.x[k][i]);
        if (traj.has_derivatives())
            for (std::size_t i = 0; i < n; ++i) out += "," + format_double(traj.xdot[k][i]);
        out += "\n";
    }
    write_file_atomic(path, out);
}

/// Fills the derivative channel by second-order finite differences: central
/// stencil (x[k+1]-x[k-1])/(2dt) inside, one-sided (-3x[0]+4x[1]-x[2])/(2dt)
/// and its mirror at the ends. Exact for signals quadratic in t.
inline Trajectory differentiate(const Trajectory& traj) {
    if (traj.has_derivatives())
        throw std::invalid_argument("differentiate: derivative channel already present");
    if (traj.size() < 3) throw std::invalid_argument("differentiate: need at least 3 samples");
    const std::size_t m = traj.size(), n = traj.dim();
    Trajectory out = traj;
    out.xdot.assign(m, Vec(n, 0.0));
    const double inv2dt = 1.0 / (2.0 * traj.dt);
    for (std::size_t i = 0; i < n; ++i) {
        out.xdot[0][i] = (-3.0 * traj.x[0][i] + 4.0 * traj.x[1][i] - traj.x[2][i]) * inv2dt;
        for (std::size_t k = 1; k + 1 < m; ++k)
            out.xdot[k][i] = (traj.x[k + 1][i] - traj.x[k - 1][i]) * inv2dt;
        out.xdot[m - 1][i] =
            (3.0 * traj.x[m - 1][i] - 4.0 * traj.x[m - 2][i] + traj.x[m - 3][i]) * inv2dt;
    }
    return out;
}

/// Deterministic shuffle-then-cut partition into (train, test).
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, std::size_t train_count,
                                                 std::uint64_t seed) {
    if (train_count == 0 || train_count >= ds.size())
        throw std::invalid_argument("split_dataset: train_count must be in (0, dataset size)");
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(seed, 0));
    for (std::size_t i = idx.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(idx[i - 1], idx[j]);
    }
    Dataset train, test;
    train.role = Role::train;
    test.role = Role::test;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        (k < train_count ? train : test).trajectories.push_back(ds.trajectories[idx[k]]);
    }
    return {std::move(train), std::move(test)};
}

/// Dataset manifest: {"dt": <real>, "files": [...], "role": "train"|"test"}.
/// File paths are resolved relative to the manifest's directory.
inline void save_dataset_manifest(const Dataset& ds, const std::vector<std::string>& files,
                                  const std::filesystem::path& path) {
    nlohmann::json j;
    j["dt"] = ds.trajectories.empty() ? 0.0 : ds.trajectories.front().dt;
    j["files"] = files;
    j["role"] = ds.role == Role::train ? "train" : "test";
    write_file_atomic(path, j.dump(2) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("cannot open dataset manifest: " + manifest_path.string());
    nlohmann::json j = nlohmann::json::parse(in);
    Dataset ds;
    const std::string role = j.at("role").get<std::string>();
    if (role == "train")
        ds.role = Role::train;
    else if (role == "test")
        ds.role = Role::test;
    else
        throw std::invalid_argument("dataset manifest: role must be 'train' or 'test'");
    const auto base = manifest_path.parent_path();
    for (const auto& f : j.at("files")) {
        std::filesystem::path p = f.get<std::string>();
        if (p.is_relative()) p = base / p;
        ds.trajectories.push_back(load_trajectory(p));
    }
    if (ds.trajectories.empty()) throw std::invalid_argument("dataset manifest lists no files");
    const std::size_t n = ds.dim();
    for (const auto& tr : ds.trajectories)
        if (tr.dim() != n)
            throw std::invalid_argument("dataset mixes state dimensions");
    return ds;
}

}  // namespace lyocert
