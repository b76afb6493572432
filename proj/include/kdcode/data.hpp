#pragma once

// Synthetic clustered embeddings, text embedding files, codebook TSV files,
// binary checkpoints and key/value run reports.
//
// Checkpoint layout (all integers little-endian):
//   "KDC1"
//   u32 composer variant (0 linear, 1 lstm)
//   u64 K, u64 D, u64 d', u64 d, u64 N (0 when no logits are stored)
//   f64[...] model arrays in for_each_array order
//   f64[N*D*K] code logits (optional)

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kdcode/codec.hpp"
#include "kdcode/model.hpp"
#include "kdcode/numerics.hpp"

namespace kdcode {

/// Malformed input, located by 1-based line and column (column 0 when the
/// whole line is at fault).
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& source, std::size_t line, std::size_t column, const std::string& msg)
        : std::runtime_error(format(source, line, column, msg)), line_(line), column_(column) {}
    std::size_t line() const { return line_; }
    std::size_t column() const { return column_; }

private:
    static std::string format(const std::string& source, std::size_t line, std::size_t column,
                              const std::string& msg) {
        std::ostringstream out;
        out << source << ":" << line;
        if (column) out << ":" << column;
        out << ": " << msg;
        return out.str();
    }
    std::size_t line_;
    std::size_t column_;
};

class FormatError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmbeddingMatrix {
    Matrix vectors;                   // N x d
    std::vector<std::string> labels;  // empty or N unique labels

    std::size_t size() const { return vectors.rows(); }
    std::size_t width() const { return vectors.cols(); }

    friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;
};

struct SyntheticSpec {
    std::size_t num_points = 10000;
    std::size_t num_clusters = 100;
    std::size_t dim = 10;
    double center_scale = 10.0;
    double noise_sigma = 0.1;
    std::uint64_t seed = 0;

    double separation_ratio() const { return noise_sigma > 0.0 ? center_scale / noise_sigma : std::numeric_limits<double>::infinity(); }
};

struct SyntheticData {
    EmbeddingMatrix embeddings;
    std::vector<std::uint32_t> cluster;  // ground-truth cluster of each point
    Matrix centers;
};

/// Centers ~ N(0, center_scale² I); point i belongs to cluster i mod C and is
/// its center plus N(0, noise_sigma² I).
inline SyntheticData generate_clusters(const SyntheticSpec& spec) {
    if (spec.num_clusters < 1 || spec.num_clusters > spec.num_points)
        throw std::invalid_argument("generate_clusters: need 1 <= num_clusters <= num_points");
    if (spec.dim < 1) throw std::invalid_argument("generate_clusters: dim must be positive");
    if (spec.center_scale <= 0.0 || spec.noise_sigma < 0.0)
        throw std::invalid_argument("generate_clusters: scales must be positive");
    Rng rng(spec.seed);
    SyntheticData out;
    out.centers = Matrix(spec.num_clusters, spec.dim);
    rng.fill_normal(out.centers.values(), 0.0, spec.center_scale);
    out.embeddings.vectors = Matrix(spec.num_points, spec.dim);
    out.cluster.resize(spec.num_points);
    out.embeddings.labels.resize(spec.num_points);
    for (std::size_t i = 0; i < spec.num_points; ++i) {
        const auto c = static_cast<std::uint32_t>(i % spec.num_clusters);
        out.cluster[i] = c;
        out.embeddings.labels[i] = "p" + std::to_string(i);
        auto row = out.embeddings.vectors.row(i);
        const auto center = out.centers.row(c);
        for (std::size_t k = 0; k < spec.dim; ++k)
            row[k] = center[k] + (spec.noise_sigma > 0.0 ? rng.normal(0.0, spec.noise_sigma) : 0.0);
    }
    return out;
}

namespace detail {

inline std::string_view trim_cr(std::string_view line) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    return line;
}

inline bool is_blank(std::string_view s) {
    return std::all_of(s.begin(), s.end(), [](char c) { return c == ' ' || c == '\t'; });
}

struct Token {
    std::string_view text;
    std::size_t column;  // 1-based
};

inline std::vector<Token> split_ws(std::string_view line) {
    std::vector<Token> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
        if (i >= line.size()) break;
        const std::size_t start = i;
        while (i < line.size() && line[i] != ' ' && line[i] != '\t') ++i;
        out.push_back({line.substr(start, i - start), start + 1});
    }
    return out;
}

inline std::optional<double> parse_double(std::string_view s) {
    double v = 0.0;
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end || !std::isfinite(v)) return std::nullopt;
    return v;
}

template <class Int>
std::optional<Int> parse_uint(std::string_view s) {
    Int v = 0;
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end) return std::nullopt;
    return v;
}

/// Shortest text that round-trips the exact double.
inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

inline std::ifstream open_in(const std::string& path, std::ios::openmode mode = std::ios::in) {
    std::ifstream in(path, mode);
    if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
    return in;
}

inline std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::out) {
    std::ofstream out(path, mode | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    return out;
}

}  // namespace detail

/// One symbol per line: label followed by d whitespace-separated reals.
inline EmbeddingMatrix read_embeddings_text(std::istream& in, const std::string& source = "<input>") {
    EmbeddingMatrix out;
    std::vector<double> values;
    std::set<std::string, std::less<>> seen;
    std::size_t width = 0;
    std::string raw;
    for (std::size_t line_no = 1; std::getline(in, raw); ++line_no) {
        const auto line = detail::trim_cr(raw);
        if (detail::is_blank(line)) continue;
        const auto tokens = detail::split_ws(line);
        if (tokens.size() < 2) throw ParseError(source, line_no, 0, "expected a label followed by at least one value");
        const std::size_t w = tokens.size() - 1;
        if (out.labels.empty()) width = w;
        else if (w != width)
            throw ParseError(source, line_no, 0,
                             "expected " + std::to_string(width) + " values, found " + std::to_string(w));
        std::string label(tokens[0].text);
        if (!seen.insert(label).second) throw ParseError(source, line_no, 1, "duplicate label '" + label + "'");
        for (std::size_t t = 1; t < tokens.size(); ++t) {
            const auto v = detail::parse_double(tokens[t].text);
            if (!v)
                throw ParseError(source, line_no, tokens[t].column,
                                 "not a finite number: '" + std::string(tokens[t].text) + "'");
            values.push_back(*v);
        }
        out.labels.push_back(std::move(label));
    }
    if (out.labels.empty()) throw ParseError(source, 1, 0, "no embeddings found");
    out.vectors = Matrix(out.labels.size(), width, std::move(values));
    return out;
}

inline EmbeddingMatrix load_embeddings_text(const std::string& path) {
    auto in = detail::open_in(path);
    return read_embeddings_text(in, path);
}

inline void write_embeddings_text(std::ostream& out, const EmbeddingMatrix& m) {
    if (m.labels.size() != m.size()) throw std::invalid_argument("write_embeddings_text: every row needs a label");
    for (std::size_t i = 0; i < m.size(); ++i) {
        out << m.labels[i];
        for (double v : m.vectors.row(i)) out << ' ' << detail::format_double(v);
        out << '\n';
    }
}

inline void save_embeddings_text(const std::string& path, const EmbeddingMatrix& m) {
    auto out = detail::open_out(path);
    write_embeddings_text(out, m);
    if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

/// "label<TAB>cluster" lines.
inline void save_labels(const std::string& path, const std::vector<std::string>& names,
                        std::span<const std::uint32_t> clusters) {
    auto out = detail::open_out(path);
    for (std::size_t i = 0; i < clusters.size(); ++i) out << names.at(i) << '\t' << clusters[i] << '\n';
    if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

struct LabelFile {
    std::vector<std::string> names;
    std::vector<std::uint32_t> clusters;
};

inline LabelFile load_labels(const std::string& path) {
    auto in = detail::open_in(path);
    LabelFile out;
    std::string raw;
    for (std::size_t line_no = 1; std::getline(in, raw); ++line_no) {
        const auto line = detail::trim_cr(raw);
        if (detail::is_blank(line)) continue;
        const auto tokens = detail::split_ws(line);
        if (tokens.size() != 2) throw ParseError(path, line_no, 0, "expected 'label<TAB>cluster'");
        const auto c = detail::parse_uint<std::uint32_t>(tokens[1].text);
        if (!c) throw ParseError(path, line_no, tokens[1].column, "cluster id is not a non-negative integer");
        out.names.emplace_back(tokens[0].text);
        out.clusters.push_back(*c);
    }
    return out;
}

/// Header "#kd K=<K> D=<D> N=<N>", then "label<TAB>c1-c2-...-cD" per symbol.
/// Codebooks without labels are written with empty label fields.
inline void write_codebook(std::ostream& out, const CodeBook& cb) {
    const auto& s = cb.spec();
    out << "#kd K=" << s.cardinality() << " D=" << s.code_dims() << " N=" << s.symbols() << '\n';
    for (std::size_t i = 0; i < cb.size(); ++i) {
        if (cb.has_labels()) out << cb.labels()[i];
        out << '\t' << render_code(cb.code(i)) << '\n';
    }
}

inline void save_codebook(const std::string& path, const CodeBook& cb) {
    auto out = detail::open_out(path);
    write_codebook(out, cb);
    if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

inline CodeBook read_codebook(std::istream& in, const std::string& source = "<input>") {
    std::string raw;
    if (!std::getline(in, raw)) throw ParseError(source, 1, 0, "missing '#kd' header");
    std::size_t k = 0, d = 0, n = 0;
    {
        const auto tokens = detail::split_ws(detail::trim_cr(raw));
        if (tokens.size() != 4 || tokens[0].text != "#kd")
            throw ParseError(source, 1, 0, "header must be '#kd K=<K> D=<D> N=<N>'");
        const char* keys[] = {"K=", "D=", "N="};
        std::size_t* dest[] = {&k, &d, &n};
        for (int f = 0; f < 3; ++f) {
            const auto t = tokens[f + 1];
            const auto v = t.text.starts_with(keys[f]) ? detail::parse_uint<std::size_t>(t.text.substr(2))
                                                       : std::nullopt;
            if (!v) throw ParseError(source, 1, t.column, std::string("expected ") + keys[f] + "<integer>");
            *dest[f] = *v;
        }
    }
    std::optional<KdSpec> spec;
    try {
        spec.emplace(k, d, n);
    } catch (const std::invalid_argument& e) {
        throw ParseError(source, 1, 0, e.what());
    }

    std::vector<std::uint32_t> codes;
    codes.reserve(n * d);
    std::vector<std::string> labels;
    bool any_label = false;
    std::size_t line_no = 1;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto line = detail::trim_cr(raw);
        if (line.empty()) continue;
        if (labels.size() == n)
            throw ParseError(source, line_no, 0, "more entries than N=" + std::to_string(n) + " declared in header");
        const auto tab = line.find('\t');
        if (tab == std::string_view::npos) throw ParseError(source, line_no, 0, "expected 'label<TAB>code'");
        labels.emplace_back(line.substr(0, tab));
        any_label = any_label || !labels.back().empty();
        std::string_view code = line.substr(tab + 1);
        std::size_t column = tab + 2, parts = 0;
        while (true) {
            const auto dash = code.find('-');
            const auto part = code.substr(0, dash);
            const auto v = detail::parse_uint<std::uint32_t>(part);
            if (!v) throw ParseError(source, line_no, column, "code component is not a non-negative integer");
            if (*v >= k)
                throw ParseError(source, line_no, column,
                                 "code component " + std::to_string(*v) + " is not below K=" + std::to_string(k));
            codes.push_back(*v);
            ++parts;
            if (dash == std::string_view::npos) break;
            code.remove_prefix(dash + 1);
            column += dash + 1;
        }
        if (parts != d)
            throw ParseError(source, line_no, 0,
                             "code has " + std::to_string(parts) + " components, header says D=" + std::to_string(d));
    }
    if (labels.size() != n)
        throw ParseError(source, line_no, 0,
                         "header says N=" + std::to_string(n) + " but found " + std::to_string(labels.size()) +
                             " entries");
    if (any_label && std::any_of(labels.begin(), labels.end(), [](const auto& l) { return l.empty(); }))
        throw ParseError(source, 0, 0, "either every entry or no entry must carry a label");
    if (!any_label) labels.clear();
    return CodeBook(*spec, std::move(codes), std::move(labels));
}

inline CodeBook load_codebook(const std::string& path) {
    auto in = detail::open_in(path);
    return read_codebook(in, path);
}

struct Checkpoint {
    KdModel model;
    std::optional<CodeLogits> logits;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr char kCheckpointMagic[4] = {'K', 'D', 'C', '1'};

namespace detail {

inline void put_u64(std::string& buf, std::uint64_t v) {
    for (int b = 0; b < 8; ++b) buf.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

inline void put_u32(std::string& buf, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) buf.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

inline void put_doubles(std::string& buf, std::span<const double> xs) {
    for (double x : xs) put_u64(buf, std::bit_cast<std::uint64_t>(x));
}

class ByteReader {
public:
    ByteReader(std::string_view bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

    std::uint64_t u64() { return get(8); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    void doubles(std::span<double> out) {
        for (double& x : out) x = std::bit_cast<double>(get(8));
    }

    void require(std::uint64_t count, std::uint64_t width) {
        if (count > (bytes_.size() - at_) / width)
            truncated(at_ + count * width);
    }
    std::size_t remaining() const { return bytes_.size() - at_; }

private:
    std::uint64_t get(int n) {
        if (bytes_.size() - at_ < static_cast<std::size_t>(n)) truncated(at_ + n);
        std::uint64_t v = 0;
        for (int b = 0; b < n; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[at_ + b])) << (8 * b);
        at_ += n;
        return v;
    }
    [[noreturn]] void truncated(std::uint64_t needed) const {
        throw FormatError(source_ + ": truncated checkpoint, expected at least " + std::to_string(needed) +
                          " bytes but file has " + std::to_string(bytes_.size()));
    }

    std::string_view bytes_;
    std::string source_;
    std::size_t at_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
    ck.model.validate();
    std::string buf(kCheckpointMagic, 4);
    detail::put_u32(buf, ck.model.variant() == ComposerVariant::linear ? 0u : 1u);
    detail::put_u64(buf, ck.model.cardinality());
    detail::put_u64(buf, ck.model.code_dims());
    detail::put_u64(buf, ck.model.code_width());
    detail::put_u64(buf, ck.model.output_width());
    detail::put_u64(buf, ck.logits ? ck.logits->spec().symbols() : 0);
    for_each_array(ck.model, [&](std::span<const double> a) { detail::put_doubles(buf, a); });
    if (ck.logits) {
        const auto& s = ck.logits->spec();
        if (s.cardinality() != ck.model.cardinality() || s.code_dims() != ck.model.code_dims())
            throw std::invalid_argument("encode_checkpoint: logits K/D do not match the model");
        detail::put_doubles(buf, ck.logits->values());
    }
    return buf;
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source = "<checkpoint>") {
    if (bytes.size() < 4 || !std::equal(kCheckpointMagic, kCheckpointMagic + 4, bytes.begin()))
        throw FormatError(source + ": bad magic, not a KDC1 checkpoint");
    detail::ByteReader r(bytes.substr(4), source);
    const auto variant_tag = r.u32();
    if (variant_tag > 1) throw FormatError(source + ": unknown composer variant " + std::to_string(variant_tag));
    const auto k = r.u64(), d = r.u64(), width = r.u64(), out_width = r.u64(), n = r.u64();
    if (k < 2 || d < 1 || width < 1 || out_width < 1) throw FormatError(source + ": invalid checkpoint dimensions");
    const auto variant = variant_tag == 0 ? ComposerVariant::linear : ComposerVariant::lstm;

    // Size check before allocating anything.
    unsigned __int128 expected = static_cast<unsigned __int128>(k) * d * width + static_cast<unsigned __int128>(width) * out_width;
    if (variant == ComposerVariant::lstm) expected += 4 * (static_cast<unsigned __int128>(width) * width + width);
    expected += static_cast<unsigned __int128>(n) * d * k;
    const std::uint64_t header = 4 + 4 + 5 * 8;
    const unsigned __int128 expected_bytes = header + expected * 8;
    const std::uint64_t actual = bytes.size();
    if (expected_bytes != actual) {
        const std::string want = expected_bytes > std::numeric_limits<std::uint64_t>::max()
                                     ? std::string("more than 2^64")
                                     : std::to_string(static_cast<std::uint64_t>(expected_bytes));
        throw FormatError(source + (expected_bytes > actual ? ": truncated checkpoint" : ": trailing bytes in checkpoint") +
                          ", expected " + want + " bytes but file has " + std::to_string(actual));
    }

    Checkpoint ck{KdModel::zeros(variant, k, d, width, out_width), std::nullopt};
    for_each_array(ck.model, [&](std::span<double> a) { r.doubles(a); });
    if (n > 0) {
        std::optional<KdSpec> spec;
        try {
            spec.emplace(k, d, n);
        } catch (const std::invalid_argument& e) {
            throw FormatError(source + ": " + e.what());
        }
        CodeLogits logits(*spec);
        r.doubles(logits.values());
        ck.logits = std::move(logits);
    }
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    const std::string bytes = encode_checkpoint(ck);
    auto out = detail::open_out(path, std::ios::out | std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    auto in = detail::open_in(path, std::ios::in | std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return decode_checkpoint(ss.str(), path);
}

/// Ordered "key<TAB>value" metrics.
class RunReport {
public:
    void add(std::string key, std::string value) { entries_.emplace_back(std::move(key), std::move(value)); }
    void add(std::string key, double value) { add(std::move(key), detail::format_double(value)); }
    void add(std::string key, std::uint64_t value) { add(std::move(key), std::to_string(value)); }

    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

    std::optional<std::string> get(std::string_view key) const {
        for (const auto& [k, v] : entries_)
            if (k == key) return v;
        return std::nullopt;
    }

    void write(std::ostream& out) const {
        for (const auto& [k, v] : entries_) out << k << '\t' << v << '\n';
    }

    void save(const std::string& path) const {
        auto out = detail::open_out(path);
        write(out);
        if (!out) throw std::runtime_error("failed writing '" + path + "'");
    }

    static RunReport read(std::istream& in, const std::string& source = "<report>") {
        RunReport r;
        std::string raw;
        for (std::size_t line_no = 1; std::getline(in, raw); ++line_no) {
            const auto line = detail::trim_cr(raw);
            if (line.empty()) continue;
            const auto tab = line.find('\t');
            if (tab == std::string_view::npos) throw ParseError(source, line_no, 0, "expected 'key<TAB>value'");
            r.add(std::string(line.substr(0, tab)), std::string(line.substr(tab + 1)));
        }
        return r;
    }

    static RunReport load(const std::string& path) {
        auto in = detail::open_in(path);
        return read(in, path);
    }

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace kdcode
