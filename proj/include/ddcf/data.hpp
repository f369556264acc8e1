#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ddcf/random.hpp"
#include "ddcf/sparse.hpp"

namespace ddcf {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Explicit ratings as per-user sparse rows over dense indices, with the maps
/// back to external IDs.
struct RatingMatrix {
    std::size_t num_users = 0;
    std::size_t num_items = 0;
    std::vector<SparseRow> rows;
    std::vector<std::string> user_ids;
    std::vector<std::string> item_ids;

    std::size_t nnz() const {
        std::size_t n = 0;
        for (const auto& r : rows) {
            n += r.nnz();
        }
        return n;
    }

    std::optional<Index> find_user(std::string_view id) const {
        for (std::size_t u = 0; u < user_ids.size(); u++) {
            if (user_ids[u] == id) {
                return static_cast<Index>(u);
            }
        }
        return std::nullopt;
    }

    std::optional<Index> find_item(std::string_view id) const {
        for (std::size_t j = 0; j < item_ids.size(); j++) {
            if (item_ids[j] == id) {
                return static_cast<Index>(j);
            }
        }
        return std::nullopt;
    }

    /// Throws unless every stored rating is positive and every row is strictly
    /// increasing in item index.
    void validate() const {
        if (num_users == 0 || num_items == 0) {
            throw DataError("rating matrix is empty");
        }
        if (rows.size() != num_users) {
            throw DataError("rating matrix has " + std::to_string(rows.size()) + " rows for "
                            + std::to_string(num_users) + " users");
        }
        for (std::size_t u = 0; u < rows.size(); u++) {
            const auto& r = rows[u];
            for (std::size_t e = 0; e < r.nnz(); e++) {
                if (r.indices[e] >= num_items || (e > 0 && r.indices[e] <= r.indices[e - 1])) {
                    throw DataError("row " + std::to_string(u) + " has invalid or unsorted item indices");
                }
                if (!(r.values[e] > 0.0)) {
                    throw DataError("row " + std::to_string(u) + " stores a non-positive rating");
                }
            }
        }
    }
};

/// Implicit form of a rating matrix: same pattern, all values 1.
struct BinaryMatrix {
    std::size_t num_users = 0;
    std::size_t num_items = 0;
    std::vector<SparseRow> rows;
};

struct SplitFractions {
    double train = 0.6;
    double validation = 0.1;
    double test = 0.3;
};

struct SplitDataset {
    RatingMatrix train;
    RatingMatrix validation;
    RatingMatrix test;
    std::uint64_t seed = 0;
    SplitFractions fractions;
    double positive_threshold = 4.0;
    std::size_t min_interactions = 10;
};

struct LoadOptions {
    /// Field separator; empty means detect from the first data line
    /// ("::", tab, comma, then space).
    std::string delimiter;
    bool skip_header = false;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
        s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '\n')) {
        s.remove_suffix(1);
    }
    return s;
}

inline std::vector<std::string_view> split(std::string_view line, std::string_view delim) {
    std::vector<std::string_view> out;
    if (delim == " ") {
        std::size_t i = 0;
        while (i < line.size()) {
            while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) {
                i++;
            }
            std::size_t j = i;
            while (j < line.size() && line[j] != ' ' && line[j] != '\t') {
                j++;
            }
            if (j > i) {
                out.push_back(line.substr(i, j - i));
            }
            i = j;
        }
        return out;
    }
    std::size_t start = 0;
    while (true) {
        std::size_t pos = line.find(delim, start);
        if (pos == std::string_view::npos) {
            out.push_back(trim(line.substr(start)));
            break;
        }
        out.push_back(trim(line.substr(start, pos - start)));
        start = pos + delim.size();
    }
    return out;
}

inline std::string detect_delimiter(std::string_view line) {
    for (std::string_view d : {"::", "\t", ",", "|"}) {
        if (line.find(d) != std::string_view::npos) {
            return std::string(d);
        }
    }
    return " ";
}

inline bool parse_double(std::string_view s, double& out) {
    s = trim(s);
    if (s.empty()) {
        return false;
    }
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size();
}

inline bool is_integer(std::string_view s) {
    if (s.empty() || s.size() > 18) {
        return false;
    }
    return std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

/// Sort order for external IDs: numeric when every ID is a non-negative
/// integer, lexicographic otherwise.
inline std::vector<std::string> sorted_ids(const std::set<std::string>& ids) {
    std::vector<std::string> out(ids.begin(), ids.end());
    bool numeric = std::all_of(out.begin(), out.end(), [](const std::string& s) { return is_integer(s); });
    if (numeric) {
        std::sort(out.begin(), out.end(), [](const std::string& a, const std::string& b) {
            return std::stoll(a) < std::stoll(b);
        });
    }
    return out;
}

/// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

} // namespace detail

/// Parses "user<d>item<d>rating[<d>timestamp]" lines. Duplicate (user, item)
/// pairs keep the last occurrence.
inline RatingMatrix load_ratings(const std::filesystem::path& path, const LoadOptions& options = {}) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open ratings file " + path.string());
    }
    std::string delim = options.delimiter;
    std::map<std::pair<std::string, std::string>, double> entries;
    std::set<std::string> users, items;
    std::string line;
    std::size_t line_no = 0;
    bool header_pending = options.skip_header;
    while (std::getline(in, line)) {
        line_no++;
        std::string_view view = detail::trim(line);
        if (view.empty()) {
            continue;
        }
        if (header_pending) {
            header_pending = false;
            continue;
        }
        if (delim.empty()) {
            delim = detail::detect_delimiter(view);
        }
        auto fields = detail::split(view, delim);
        double rating = 0.0;
        if (fields.size() < 3 || fields[0].empty() || fields[1].empty() || !detail::parse_double(fields[2], rating)) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": cannot parse rating line '"
                            + std::string(view) + "'");
        }
        if (!(rating > 0.0) || !std::isfinite(rating)) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": ratings must be positive, got "
                            + std::string(fields[2]));
        }
        std::string user(fields[0]), item(fields[1]);
        entries[{user, item}] = rating;
        users.insert(user);
        items.insert(item);
    }
    if (entries.empty()) {
        throw DataError("ratings file " + path.string() + " contains no ratings");
    }

    RatingMatrix m;
    m.user_ids = detail::sorted_ids(users);
    m.item_ids = detail::sorted_ids(items);
    m.num_users = m.user_ids.size();
    m.num_items = m.item_ids.size();
    std::unordered_map<std::string, Index> user_index, item_index;
    for (std::size_t i = 0; i < m.user_ids.size(); i++) {
        user_index[m.user_ids[i]] = static_cast<Index>(i);
    }
    for (std::size_t i = 0; i < m.item_ids.size(); i++) {
        item_index[m.item_ids[i]] = static_cast<Index>(i);
    }
    std::vector<std::vector<std::pair<Index, double>>> rows(m.num_users);
    for (const auto& [key, rating] : entries) {
        rows[user_index[key.first]].emplace_back(item_index[key.second], rating);
    }
    m.rows.resize(m.num_users);
    for (std::size_t u = 0; u < rows.size(); u++) {
        std::sort(rows[u].begin(), rows[u].end());
        for (auto [j, r] : rows[u]) {
            m.rows[u].push(j, r);
        }
    }
    return m;
}

/// Drops users with fewer than `min_count` ratings, then items left without
/// any rating, and re-densifies both index spaces.
inline RatingMatrix filter_min_interactions(const RatingMatrix& m, std::size_t min_count) {
    if (min_count < 1) {
        throw DataError("min_count must be at least 1");
    }
    std::vector<std::size_t> kept_users;
    std::vector<bool> item_used(m.num_items, false);
    for (std::size_t u = 0; u < m.num_users; u++) {
        if (m.rows[u].nnz() >= min_count) {
            kept_users.push_back(u);
            for (Index j : m.rows[u].indices) {
                item_used[j] = true;
            }
        }
    }
    if (kept_users.empty()) {
        throw DataError("no user has at least " + std::to_string(min_count)
                        + " ratings; lower the minimum interaction threshold");
    }
    std::vector<Index> remap(m.num_items, 0);
    RatingMatrix out;
    for (std::size_t j = 0; j < m.num_items; j++) {
        if (item_used[j]) {
            remap[j] = static_cast<Index>(out.item_ids.size());
            out.item_ids.push_back(m.item_ids.empty() ? std::to_string(j) : m.item_ids[j]);
        }
    }
    for (std::size_t u : kept_users) {
        out.user_ids.push_back(m.user_ids.empty() ? std::to_string(u) : m.user_ids[u]);
        SparseRow row;
        for (std::size_t e = 0; e < m.rows[u].nnz(); e++) {
            row.push(remap[m.rows[u].indices[e]], m.rows[u].values[e]);
        }
        out.rows.push_back(std::move(row));
    }
    out.num_users = out.rows.size();
    out.num_items = out.item_ids.size();
    return out;
}

/// Per-user random partition: floor(validation * n) validation items,
/// floor(test * n) test items, the remainder for training.
inline SplitDataset split_per_user(const RatingMatrix& m, std::uint64_t seed, SplitFractions fractions = {}) {
    double total = fractions.train + fractions.validation + fractions.test;
    if (std::abs(total - 1.0) > 1e-9 || fractions.train < 0 || fractions.validation < 0 || fractions.test < 0) {
        throw DataError("split fractions must be non-negative and sum to 1");
    }
    SplitDataset split;
    split.seed = seed;
    split.fractions = fractions;
    for (RatingMatrix* part : {&split.train, &split.validation, &split.test}) {
        part->num_users = m.num_users;
        part->num_items = m.num_items;
        part->user_ids = m.user_ids;
        part->item_ids = m.item_ids;
        part->rows.resize(m.num_users);
    }
    for (std::size_t u = 0; u < m.num_users; u++) {
        const SparseRow& row = m.rows[u];
        std::size_t n = row.nnz();
        auto n_val = static_cast<std::size_t>(std::floor(fractions.validation * static_cast<double>(n) + 1e-9));
        auto n_test = static_cast<std::size_t>(std::floor(fractions.test * static_cast<double>(n) + 1e-9));
        if (n_val + n_test >= n) {
            throw DataError("user " + (m.user_ids.empty() ? std::to_string(u) : m.user_ids[u]) + " has only "
                            + std::to_string(n) + " ratings, too few for a non-empty training row");
        }
        std::vector<std::size_t> order(n);
        for (std::size_t e = 0; e < n; e++) {
            order[e] = e;
        }
        CounterRng rng{seed, 0x5b1f, static_cast<std::uint64_t>(u)};
        rng.shuffle(order);
        std::vector<int> which(n, 0);
        for (std::size_t e = 0; e < n_val; e++) {
            which[order[e]] = 1;
        }
        for (std::size_t e = n_val; e < n_val + n_test; e++) {
            which[order[e]] = 2;
        }
        RatingMatrix* parts[3] = {&split.train, &split.validation, &split.test};
        for (std::size_t e = 0; e < n; e++) {
            parts[which[e]]->rows[u].push(row.indices[e], row.values[e]);
        }
    }
    return split;
}

/// X_ij = 1 where R_ij > 0. With `min_rating`, only ratings >= min_rating
/// are kept (positives-only intent input).
inline BinaryMatrix binarize(const RatingMatrix& m, std::optional<double> min_rating = std::nullopt) {
    BinaryMatrix x;
    x.num_users = m.num_users;
    x.num_items = m.num_items;
    x.rows.resize(m.rows.size());
    for (std::size_t u = 0; u < m.rows.size(); u++) {
        const auto& r = m.rows[u];
        for (std::size_t e = 0; e < r.nnz(); e++) {
            if (r.values[e] > 0.0 && (!min_rating || r.values[e] >= *min_rating)) {
                x.rows[u].push(r.indices[e], 1.0);
            }
        }
    }
    return x;
}

/// Item index -> genre labels.
struct GenreTable {
    std::unordered_map<Index, std::vector<std::string>> genres;

    bool share_genre(Index a, Index b) const {
        auto ia = genres.find(a);
        auto ib = genres.find(b);
        if (ia == genres.end() || ib == genres.end()) {
            return false;
        }
        for (const auto& g : ia->second) {
            if (std::find(ib->second.begin(), ib->second.end(), g) != ib->second.end()) {
                return true;
            }
        }
        return false;
    }
};

/// Reads "item_id|genre1,genre2" lines; items absent from `m` are skipped.
inline GenreTable load_genres(const std::filesystem::path& path, const RatingMatrix& m) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open genre file " + path.string());
    }
    std::unordered_map<std::string, Index> item_index;
    for (std::size_t j = 0; j < m.item_ids.size(); j++) {
        item_index[m.item_ids[j]] = static_cast<Index>(j);
    }
    GenreTable table;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        line_no++;
        std::string_view view = detail::trim(line);
        if (view.empty()) {
            continue;
        }
        auto bar = view.find('|');
        if (bar == std::string_view::npos) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected item_id|genre,...");
        }
        auto it = item_index.find(std::string(detail::trim(view.substr(0, bar))));
        if (it == item_index.end()) {
            continue;
        }
        std::vector<std::string> names;
        for (auto g : detail::split(view.substr(bar + 1), ",")) {
            if (!g.empty()) {
                names.emplace_back(g);
            }
        }
        if (!names.empty()) {
            table.genres[it->second] = std::move(names);
        }
    }
    return table;
}

namespace detail {

inline void write_matrix_entries(const std::filesystem::path& path, const RatingMatrix& m) {
    std::ofstream out(path);
    for (std::size_t u = 0; u < m.rows.size(); u++) {
        const auto& r = m.rows[u];
        for (std::size_t e = 0; e < r.nnz(); e++) {
            out << u << '\t' << r.indices[e] << '\t' << format_double(r.values[e]) << '\n';
        }
    }
    if (!out) {
        throw DataError("failed writing " + path.string());
    }
}

inline void read_matrix_entries(const std::filesystem::path& path, RatingMatrix& m) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    m.rows.assign(m.num_users, SparseRow{});
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        line_no++;
        if (trim(line).empty()) {
            continue;
        }
        auto f = split(trim(line), "\t");
        double u = 0, j = 0, r = 0;
        if (f.size() != 3 || !parse_double(f[0], u) || !parse_double(f[1], j) || !parse_double(f[2], r)
            || u >= static_cast<double>(m.num_users) || j >= static_cast<double>(m.num_items)) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": malformed entry");
        }
        m.rows[static_cast<std::size_t>(u)].push(static_cast<Index>(j), r);
    }
    m.validate();
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        lines.emplace_back(trim(line));
    }
    while (!lines.empty() && lines.back().empty()) {
        lines.pop_back();
    }
    return lines;
}

} // namespace detail

/// Text manifest describing a prepared split.
inline std::string split_manifest(const SplitDataset& s, const std::string& source = "") {
    std::ostringstream out;
    out << "format=ddcf-split-v1\n";
    if (!source.empty()) {
        out << "source=" << source << "\n";
    }
    out << "seed=" << s.seed << "\n";
    out << "fractions=" << detail::format_double(s.fractions.train) << ","
        << detail::format_double(s.fractions.validation) << "," << detail::format_double(s.fractions.test) << "\n";
    out << "min_interactions=" << s.min_interactions << "\n";
    out << "positive_threshold=" << detail::format_double(s.positive_threshold) << "\n";
    out << "users=" << s.train.num_users << "\n";
    out << "items=" << s.train.num_items << "\n";
    out << "train_entries=" << s.train.nnz() << "\n";
    out << "validation_entries=" << s.validation.nnz() << "\n";
    out << "test_entries=" << s.test.nnz() << "\n";
    out << "ranking=all items minus the user's known items; items absent from training still ranked\n";
    return out.str();
}

inline void save_split(const std::filesystem::path& dir, const SplitDataset& s, const std::string& source = "") {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "users.txt");
        for (const auto& id : s.train.user_ids) {
            out << id << '\n';
        }
    }
    {
        std::ofstream out(dir / "items.txt");
        for (const auto& id : s.train.item_ids) {
            out << id << '\n';
        }
    }
    detail::write_matrix_entries(dir / "train.tsv", s.train);
    detail::write_matrix_entries(dir / "validation.tsv", s.validation);
    detail::write_matrix_entries(dir / "test.tsv", s.test);
    std::ofstream manifest(dir / "manifest.txt");
    manifest << split_manifest(s, source);
    if (!manifest) {
        throw DataError("failed writing manifest in " + dir.string());
    }
}

inline SplitDataset load_split(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) {
        throw DataError("prepared dataset directory not found: " + dir.string());
    }
    std::map<std::string, std::string> manifest;
    for (const auto& line : detail::read_lines(dir / "manifest.txt")) {
        auto eq = line.find('=');
        if (eq != std::string::npos) {
            manifest[line.substr(0, eq)] = line.substr(eq + 1);
        }
    }
    if (manifest["format"] != "ddcf-split-v1") {
        throw DataError("unsupported split format in " + dir.string());
    }
    SplitDataset s;
    s.seed = std::stoull(manifest["seed"]);
    s.positive_threshold = std::stod(manifest["positive_threshold"]);
    s.min_interactions = std::stoull(manifest["min_interactions"]);
    auto fr = detail::split(manifest["fractions"], ",");
    if (fr.size() == 3) {
        detail::parse_double(fr[0], s.fractions.train);
        detail::parse_double(fr[1], s.fractions.validation);
        detail::parse_double(fr[2], s.fractions.test);
    }
    auto users = detail::read_lines(dir / "users.txt");
    auto items = detail::read_lines(dir / "items.txt");
    for (auto [part, file] : {std::pair{&s.train, "train.tsv"}, std::pair{&s.validation, "validation.tsv"},
                              std::pair{&s.test, "test.tsv"}}) {
        part->user_ids = users;
        part->item_ids = items;
        part->num_users = users.size();
        part->num_items = items.size();
        detail::read_matrix_entries(dir / file, *part);
    }
    return s;
}

/// Loads, filters and splits in one go.
inline SplitDataset prepare_dataset(const std::filesystem::path& ratings, const LoadOptions& options,
                                    std::size_t min_interactions, std::uint64_t seed,
                                    SplitFractions fractions = {}, double positive_threshold = 4.0) {
    RatingMatrix m = filter_min_interactions(load_ratings(ratings, options), min_interactions);
    SplitDataset s = split_per_user(m, seed, fractions);
    s.min_interactions = min_interactions;
    s.positive_threshold = positive_threshold;
    return s;
}

} // namespace ddcf
