#include "w2w/io.hpp"

#include <openssl/evp.h>
#include <openssl/sha.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "w2w/error.hpp"

namespace w2w::io {

namespace {

class Writer {
public:
    void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64s(std::span<const double> v) {
        for (double x : v) f64(x);
    }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class Reader {
public:
    Reader(std::string_view bytes, const char* what) : bytes_(bytes), what_(what) {}

    void magic(const char (&expected)[8]) {
        need(8);
        if (std::memcmp(bytes_.data() + pos_, expected, 8) != 0)
            throw FormatError(std::string(what_) + ": bad magic");
        pos_ += 8;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    float f32() { return std::bit_cast<float>(u32()); }
    void f64s(std::span<double> out) {
        need(out.size() * 8);
        for (auto& v : out) v = f64();
    }
    std::string_view take(std::size_t n) {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void finish() const {
        if (pos_ != bytes_.size()) throw FormatError(std::string(what_) + ": trailing bytes");
    }
    // Guards size arithmetic on untrusted header fields.
    std::size_t count(std::uint64_t a, std::uint64_t b, std::size_t width) const {
        const std::uint64_t limit = bytes_.size();
        if (b != 0 && a > limit / b) throw FormatError(std::string(what_) + ": header sizes exceed file");
        if (a * b > limit / width) throw FormatError(std::string(what_) + ": header sizes exceed file");
        return static_cast<std::size_t>(a * b);
    }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw FormatError(std::string(what_) + ": truncated");
    }
    std::string_view bytes_;
    const char* what_;
    std::size_t pos_ = 0;
};

Matrix read_matrix(Reader& r, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    r.f64s(m.values());
    return m;
}

Vector read_vector(Reader& r, std::size_t n) {
    Vector v(n);
    r.f64s(v);
    return v;
}

}  // namespace

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[SHA256_DIGEST_LENGTH];
    SHA256(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), digest);
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * SHA256_DIGEST_LENGTH);
    for (unsigned char c : digest) {
        out.push_back(hex[c >> 4]);
        out.push_back(hex[c & 0xf]);
    }
    return out;
}

std::string base64_encode(std::string_view bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

std::string base64_decode(std::string_view text) {
    if (text.size() % 4 != 0) throw FormatError("base64 length is not a multiple of 4");
    std::string out(3 * text.size() / 4, '\0');
    const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
    if (n < 0) throw FormatError("invalid base64 payload");
    std::size_t pad = 0;
    if (!text.empty() && text.back() == '=') ++pad;
    if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

std::string encode_doubles(std::span<const double> values) {
    Writer w;
    w.f64s(values);
    return base64_encode(w.take());
}

Vector decode_doubles(std::string_view text) {
    const std::string raw = base64_decode(text);
    if (raw.size() % 8 != 0) throw FormatError("float64 payload length is not a multiple of 8");
    Reader r(raw, "float64 payload");
    Vector v(raw.size() / 8);
    r.f64s(v);
    return v;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

void write_file(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ConfigError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw ConfigError("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string file_hash(const fs::path& path) { return sha256_hex(read_file(path)); }

std::string encode_denoiser(const DenoiserParams& p) {
    Writer w;
    w.raw(kDenoiserMagic, 8);
    w.u64(p.D);
    w.u64(p.hidden);
    w.u64(p.emb);
    w.u64(p.tokens);
    for (const auto& t : p.tensors()) w.f64s(t);
    w.u64(p.skip.size());
    w.f64s(p.skip);
    return w.take();
}

DenoiserParams decode_denoiser(std::string_view bytes) {
    Reader r(bytes, "denoiser checkpoint");
    r.magic(kDenoiserMagic);
    DenoiserConfig c;
    c.D = r.u64();
    c.hidden = r.u64();
    c.emb = r.u64();
    const std::uint64_t tokens = r.u64();
    if (tokens < kFirstContextToken) throw FormatError("denoiser checkpoint: token table too small");
    c.contexts = tokens - kFirstContextToken;
    for (std::uint64_t v : {std::uint64_t{c.D}, std::uint64_t{c.hidden}, std::uint64_t{c.emb}, tokens})
        if (v == 0 || v > (1u << 20)) throw FormatError("denoiser checkpoint: implausible header");
    const std::uint64_t h = c.hidden;
    r.count(h * (c.D + c.emb) + h + h * c.emb + h * h + h + h * c.emb + c.D * h + c.D + tokens * c.emb, 1, 8);
    DenoiserParams p = DenoiserParams::zeros(c);
    for (auto t : p.tensors()) r.f64s(t);
    const std::size_t T = r.count(r.u64(), 1, 8);
    p.skip = read_vector(r, T);
    r.finish();
    return p;
}

std::string encode_dataset(const WeightDataset& ds) {
    ds.validate();
    Writer w;
    w.raw(kDatasetMagic, 8);
    w.u64(ds.size());
    w.u64(ds.thetas.cols());
    w.u64(ds.layout_version);
    w.f64s(ds.thetas.values());
    nlohmann::ordered_json trailer;
    trailer["shape"] = {{"rows", ds.shape.rows}, {"cols", ds.shape.cols}, {"rank", ds.shape.rank}};
    auto rows = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < ds.size(); ++i) rows.push_back({{"id", ds.ids[i]}, {"attrs", ds.attrs[i]}});
    trailer["rows"] = std::move(rows);
    const std::string text = trailer.dump();
    w.u64(text.size());
    w.raw(text.data(), text.size());
    return w.take();
}

WeightDataset decode_dataset(std::string_view bytes) {
    Reader r(bytes, "weight dataset");
    r.magic(kDatasetMagic);
    const std::uint64_t N = r.u64();
    const std::uint64_t d = r.u64();
    WeightDataset ds;
    ds.layout_version = static_cast<std::uint32_t>(r.u64());
    if (ds.layout_version != kFlattenLayoutVersion)
        throw FormatError("weight dataset: unsupported layout version " + std::to_string(ds.layout_version));
    r.count(N, d, 8);
    ds.thetas = read_matrix(r, N, d);
    const std::size_t len = r.count(r.u64(), 1, 1);
    nlohmann::json trailer;
    try {
        trailer = nlohmann::json::parse(r.take(len));
        ds.shape = {trailer.at("shape").at("rows").get<std::size_t>(), trailer.at("shape").at("cols").get<std::size_t>(),
                    trailer.at("shape").at("rank").get<std::size_t>()};
        for (const auto& row : trailer.at("rows")) {
            ds.ids.push_back(row.at("id").get<std::uint64_t>());
            ds.attrs.push_back(row.at("attrs").get<std::vector<std::uint8_t>>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("weight dataset trailer: ") + e.what());
    }
    r.finish();
    try {
        ds.validate();
    } catch (const Error& e) {
        throw FormatError(std::string("weight dataset: ") + e.what());
    }
    return ds;
}

std::string encode_space(const W2wSpace& s) {
    Writer w;
    w.raw(kSpaceMagic, 8);
    w.u64(s.d());
    w.u64(s.m());
    w.u64(kSpaceVersion);
    w.f64s(s.mean);
    w.f64s(s.basis.values());
    w.f64s(s.eigvals);
    w.f64s(s.coeff_mu);
    w.f64s(s.coeff_sigma);
    w.f64(s.total_variance);
    w.u64(s.fit_rows);
    return w.take();
}

W2wSpace decode_space(std::string_view bytes) {
    Reader r(bytes, "space");
    r.magic(kSpaceMagic);
    const std::uint64_t d = r.u64();
    const std::uint64_t m = r.u64();
    if (r.u64() != kSpaceVersion) throw FormatError("space: unsupported version");
    r.count(m + 1, d, 8);
    W2wSpace s;
    s.mean = read_vector(r, d);
    s.basis = read_matrix(r, m, d);
    s.eigvals = read_vector(r, m);
    s.coeff_mu = read_vector(r, m);
    s.coeff_sigma = read_vector(r, m);
    s.total_variance = r.f64();
    s.fit_rows = r.u64();
    r.finish();
    return s;
}

std::string encode_observations(std::span<const Observation> obs) {
    Writer w;
    w.raw(kObservationMagic, 8);
    const std::size_t D = obs.empty() ? 0 : obs.front().x.size();
    w.u32(static_cast<std::uint32_t>(D));
    w.u32(static_cast<std::uint32_t>(obs.size()));
    for (const auto& o : obs) {
        if (o.x.size() != D) throw ShapeMismatch("observations have differing lengths");
        for (double v : o.x) w.f32(static_cast<float>(v));
    }
    return w.take();
}

std::vector<Observation> decode_observations(std::string_view bytes, std::size_t contexts) {
    if (contexts == 0) throw ConfigError("observation decoding needs at least one context");
    Reader r(bytes, "observation file");
    r.magic(kObservationMagic);
    const std::uint32_t D = r.u32();
    const std::uint32_t count = r.u32();
    r.count(D, count, 4);
    std::vector<Observation> out(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        out[i].x.resize(D);
        for (auto& v : out[i].x) v = static_cast<double>(r.f32());
        out[i].context = i % contexts;
    }
    r.finish();
    return out;
}

std::string encode_identities(std::span<const Identity> ids) {
    std::string out;
    for (const auto& id : ids) {
        nlohmann::ordered_json j;
        j["id"] = id.id;
        j["z"] = id.z;
        j["attrs"] = id.attrs;
        out += j.dump();
        out += '\n';
    }
    return out;
}

std::vector<Identity> decode_identities(std::string_view text) {
    std::vector<Identity> out;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            Identity id;
            id.id = j.at("id").get<std::uint64_t>();
            id.z = j.at("z").get<Vector>();
            id.attrs = j.at("attrs").get<std::vector<std::uint8_t>>();
            out.push_back(std::move(id));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("identities line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

nlohmann::ordered_json direction_to_json(const EditDirection& dir) {
    nlohmann::ordered_json j;
    j["attribute"] = dir.attribute;
    j["name"] = dir.name;
    j["m_edit"] = dir.m_edit;
    j["max_strength"] = dir.max_strength;
    j["space_hash"] = dir.space_hash;
    j["bias"] = dir.bias;
    j["weights"] = encode_doubles(dir.weights);
    j["n"] = encode_doubles(dir.n);
    return j;
}

EditDirection direction_from_json(const nlohmann::json& j) {
    try {
        EditDirection dir;
        dir.attribute = j.at("attribute").get<std::size_t>();
        dir.name = j.at("name").get<std::string>();
        dir.m_edit = j.at("m_edit").get<std::size_t>();
        dir.max_strength = j.at("max_strength").get<double>();
        dir.space_hash = j.at("space_hash").get<std::string>();
        dir.bias = j.at("bias").get<double>();
        dir.weights = decode_doubles(j.at("weights").get<std::string>());
        dir.n = decode_doubles(j.at("n").get<std::string>());
        return dir;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("direction file: ") + e.what());
    }
}

nlohmann::ordered_json inversion_to_json(const InversionResult& r, const InversionConfig& c,
                                         const std::string& space_hash) {
    nlohmann::ordered_json j;
    j["space_hash"] = space_hash;
    j["config"] = {{"m_invert", c.m_invert}, {"epochs", c.epochs},       {"lr", c.lr},
                   {"beta1", c.beta1},       {"beta2", c.beta2},         {"weight_decay", c.weight_decay},
                   {"batch", c.batch},       {"eval_pool", c.eval_pool}, {"seed", c.seed}};
    j["initial_loss"] = r.initial_loss;
    j["final_loss"] = r.final_loss;
    j["best_epoch"] = r.best_epoch;
    j["beta"] = encode_doubles(r.beta);
    return j;
}

InversionResult inversion_from_json(const nlohmann::json& j, const W2wSpace& space) {
    InversionResult r;
    try {
        r.initial_loss = j.at("initial_loss").get<double>();
        r.final_loss = j.at("final_loss").get<double>();
        r.best_epoch = j.at("best_epoch").get<std::size_t>();
        r.beta = decode_doubles(j.at("beta").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("inversion result: ") + e.what());
    }
    if (r.beta.size() > space.m()) throw SpaceMismatch("inversion result has more coefficients than the space");
    r.theta = unproject(space.truncated(r.beta.size()), r.beta);
    return r;
}

std::string dump(const nlohmann::ordered_json& j) { return j.dump(2) + "\n"; }

}  // namespace w2w::io
