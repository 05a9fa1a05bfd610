#include "tcombat/io.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "tcombat/archive.hpp"
#include "tcombat/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tcombat::io {

namespace {

constexpr std::uint32_t kTensorVersion = 1;
constexpr std::uint8_t kDtypeF64 = 1;

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create directory " + dir + ": " + ec.message());
}

std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const std::string& what) {
    double v = 0.0;
    const auto* end = s.data() + s.size();
    const auto res = std::from_chars(s.data(), end, v);
    if (res.ec != std::errc() || res.ptr != end) throw DataError("cannot parse " + what + ": '" + s + "'");
    return v;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

void check_name(const std::string& s) {
    if (s.empty() || s.find_first_of(",\n\r") != std::string::npos)
        throw DataError("names written to CSV must be non-empty and free of commas and newlines: '" + s + "'");
}

std::string expect_hash(const std::string& path, const std::string& expected) {
    const auto got = file_hash(path);
    if (got != expected) throw HashMismatchError("hash mismatch for " + path + ": expected " + expected + ", got " + got);
    return got;
}

std::string indexed(const std::string& stem, std::size_t i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%03zu.tht", stem.c_str(), i);
    return buf;
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_tensor(const Tensor3& t) {
    BinaryWriter w;
    w.magic("THT1");
    w.u32(kTensorVersion);
    for (std::size_t m = 0; m < 3; ++m) w.u32(static_cast<std::uint32_t>(t.dims()[m]));
    w.u8(kDtypeF64);
    const bool masked = t.mask().count() != t.dims().size();
    w.u8(masked ? 1 : 0);
    for (double v : t.values()) w.f64(v);
    if (masked) {
        const auto& bits = t.mask().bits();
        std::vector<std::uint8_t> packed((bits.size() + 7) / 8, 0);
        for (std::size_t i = 0; i < bits.size(); ++i)
            if (bits[i]) packed[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
        w.bytes(packed.data(), packed.size());
    }
    return w.release();
}

Tensor3 decode_tensor(const std::vector<std::uint8_t>& bytes) {
    BinaryReader r(bytes);
    r.expect_magic("THT1");
    if (r.u32() != kTensorVersion) throw DataError("unsupported tensor file version");
    const std::size_t p1 = r.u32(), p2 = r.u32(), p3 = r.u32();
    if (p1 == 0 || p2 == 0 || p3 == 0) throw DataError("tensor file has a zero extent");
    if (r.u8() != kDtypeF64) throw DataError("unsupported tensor dtype");
    const std::uint8_t flag = r.u8();
    if (flag > 1) throw DataError("bad mask flag in tensor file");
    const Dims dims(p1, p2, p3);
    const std::size_t n = dims.size();
    const std::size_t expected = n * 8 + (flag ? (n + 7) / 8 : 0);
    if (r.remaining() != expected) throw DataError("tensor payload length does not match its header");
    std::vector<double> values(n);
    for (auto& v : values) v = r.f64();
    MaskPtr mask;
    if (flag) {
        std::vector<std::uint8_t> packed((n + 7) / 8);
        r.bytes(packed.data(), packed.size());
        std::vector<std::uint8_t> bits(n);
        for (std::size_t i = 0; i < n; ++i) bits[i] = (packed[i / 8] >> (i % 8)) & 1u;
        mask = std::make_shared<const Mask>(dims, std::move(bits));
    } else {
        mask = full_mask(dims);
    }
    for (std::size_t i = 0; i < n; ++i)
        if (!mask->contains(i) && values[i] != 0.0) throw DataError("nonzero value outside the tensor mask");
    return Tensor3(mask, std::move(values));
}

void write_tensor(const std::string& path, const Tensor3& tensor) { write_file_atomic(path, encode_tensor(tensor)); }

Tensor3 read_tensor(const std::string& path) { return decode_tensor(read_file(path)); }

std::string hash_hex(const std::vector<std::uint8_t>& bytes) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
    return buf;
}

std::string file_hash(const std::string& path) { return hash_hex(read_file(path)); }

void write_text(const std::string& path, const std::string& text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------

void write_dataset(const std::string& dir, const StudyDataset& data) {
    ensure_dir(join(dir, "images"));
    json manifest;
    manifest["format"] = "tcombat-dataset";
    manifest["version"] = 1;
    manifest["dims"] = {data.dims()[0], data.dims()[1], data.dims()[2]};

    write_tensor(join(dir, "mask.tht"), Tensor3(data.mask_ptr(), std::vector<double>(data.dims().size(), 1.0)));
    manifest["mask"] = {{"file", "mask.tht"}, {"hash", file_hash(join(dir, "mask.tht"))}};

    std::ostringstream csv;
    csv << "subject_id,visit,scanner,visit_months";
    for (const auto& name : data.covariate_names()) {
        check_name(name);
        csv << ',' << name;
    }
    csv << '\n';
    const auto& raw = data.raw_covariates();
    json images = json::array();
    for (std::size_t i = 0; i < data.n_images(); ++i) {
        const auto& rec = data.record(i);
        const auto& scanner = data.scanner_names()[data.scanner_of(i)];
        check_name(rec.subject);
        check_name(scanner);
        csv << rec.subject << ',' << rec.visit << ',' << scanner << ',' << format_double(rec.visit_months);
        for (Eigen::Index c = 0; c < raw.cols(); ++c) csv << ',' << format_double(raw(static_cast<Eigen::Index>(i), c));
        csv << '\n';
        const std::string name = indexed("images/image", i);
        write_tensor(join(dir, name), data.image(i));
        images.push_back({{"file", name},
                          {"subject", rec.subject},
                          {"visit", rec.visit},
                          {"hash", file_hash(join(dir, name))}});
    }
    write_text(join(dir, "covariates.csv"), csv.str());
    manifest["covariates"] = {{"file", "covariates.csv"}, {"hash", file_hash(join(dir, "covariates.csv"))}};
    manifest["images"] = images;
    write_text(join(dir, "dataset.json"), manifest.dump(2) + "\n");
}

StudyDataset read_dataset(const std::string& dir) {
    const json m = load_json(join(dir, "dataset.json"));
    try {
        if (m.at("format") != "tcombat-dataset") throw DataError("not a dataset manifest: " + dir);
        const auto mask_file = join(dir, m.at("mask").at("file").get<std::string>());
        expect_hash(mask_file, m.at("mask").at("hash").get<std::string>());
        const auto mask_tensor = read_tensor(mask_file);
        const auto mask = mask_tensor.mask_ptr();
        const auto dims = m.at("dims").get<std::vector<std::size_t>>();
        if (dims.size() != 3 || !(Dims(dims[0], dims[1], dims[2]) == mask->dims()))
            throw DimsError("mask dims differ from the manifest");

        const auto csv_file = join(dir, m.at("covariates").at("file").get<std::string>());
        expect_hash(csv_file, m.at("covariates").at("hash").get<std::string>());
        std::ifstream in(csv_file);
        std::string line;
        if (!std::getline(in, line)) throw DataError("empty covariate file");
        const auto header = split_csv(line);
        if (header.size() < 3 || header[0] != "subject_id" || header[1] != "visit" || header[2] != "scanner")
            throw DataError("covariate header must start with subject_id,visit,scanner");
        const bool has_months = header.size() > 3 && header[3] == "visit_months";
        const std::size_t first_cov = has_months ? 4 : 3;
        std::vector<std::string> names(header.begin() + static_cast<std::ptrdiff_t>(first_cov), header.end());
        std::set<std::string> unique(names.begin(), names.end());
        if (unique.size() != names.size()) throw DataError("duplicate covariate column");

        std::vector<ImageRecord> records;
        std::vector<std::string> scanners;
        std::vector<std::vector<double>> rows;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            const auto cells = split_csv(line);
            if (cells.size() != header.size())
                throw DataError("covariate row " + std::to_string(records.size() + 1) + " has the wrong column count");
            ImageRecord rec;
            rec.subject = cells[0];
            rec.visit = static_cast<int>(parse_double(cells[1], "visit"));
            rec.visit_months = has_months ? parse_double(cells[3], "visit_months") : 0.0;
            records.push_back(rec);
            scanners.push_back(cells[2]);
            std::vector<double> row;
            for (std::size_t c = first_cov; c < cells.size(); ++c) row.push_back(parse_double(cells[c], header[c]));
            rows.push_back(std::move(row));
        }
        const auto& list = m.at("images");
        if (list.size() != records.size()) throw DataError("manifest and covariate file list different image counts");
        std::vector<Tensor3> images;
        for (std::size_t i = 0; i < records.size(); ++i) {
            const auto& e = list.at(i);
            if (e.at("subject").get<std::string>() != records[i].subject || e.at("visit").get<int>() != records[i].visit)
                throw DataError("manifest entry " + std::to_string(i) + " does not match covariate row");
            const auto path = join(dir, e.at("file").get<std::string>());
            expect_hash(path, e.at("hash").get<std::string>());
            auto img = read_tensor(path);
            if (!(img.mask() == *mask)) throw DimsError("image " + path + " does not share the dataset mask");
            images.push_back(std::move(img));
        }
        Eigen::MatrixXd raw(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(names.size()));
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t c = 0; c < names.size(); ++c)
                raw(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
        return StudyDataset(mask, std::move(images), std::move(records), std::move(scanners), std::move(names), raw);
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed dataset manifest: ") + e.what());
    }
}

void write_truth(const std::string& dir, const GroundTruth& t) {
    ensure_dir(dir);
    json j;
    j["noise_sd"] = t.noise_sd;
    j["scanner_names"] = t.scanner_names;
    j["subject_names"] = t.subject_names;
    j["scanner_of_subject"] = t.scanner_of_subject;
    j["block_levels"] = t.block_levels;
    j["n_theta"] = t.theta.size();
    j["n_subject"] = t.subject.size();
    write_tensor(join(dir, "mu.tht"), t.mu);
    write_tensor(join(dir, "block.tht"), t.block);
    if (t.theta_time.size()) write_tensor(join(dir, "theta_time.tht"), t.theta_time);
    j["has_theta_time"] = t.theta_time.size() > 0;
    for (std::size_t s = 0; s < t.theta.size(); ++s) write_tensor(join(dir, indexed("theta", s)), t.theta[s]);
    for (std::size_t k = 0; k < t.gamma.size(); ++k) {
        write_tensor(join(dir, indexed("gamma", k)), t.gamma[k]);
        write_tensor(join(dir, indexed("delta", k)), t.delta[k]);
    }
    for (std::size_t i = 0; i < t.subject.size(); ++i) write_tensor(join(dir, indexed("subject", i)), t.subject[i]);
    write_text(join(dir, "truth.json"), j.dump(2) + "\n");
}

GroundTruth read_truth(const std::string& dir) {
    const json j = load_json(join(dir, "truth.json"));
    GroundTruth t;
    try {
        t.noise_sd = j.at("noise_sd").get<double>();
        t.scanner_names = j.at("scanner_names").get<std::vector<std::string>>();
        t.subject_names = j.at("subject_names").get<std::vector<std::string>>();
        t.scanner_of_subject = j.at("scanner_of_subject").get<std::vector<std::size_t>>();
        t.block_levels = j.at("block_levels").get<std::vector<double>>();
        t.mu = read_tensor(join(dir, "mu.tht"));
        t.block = read_tensor(join(dir, "block.tht"));
        if (j.at("has_theta_time").get<bool>()) t.theta_time = read_tensor(join(dir, "theta_time.tht"));
        for (std::size_t s = 0; s < j.at("n_theta").get<std::size_t>(); ++s)
            t.theta.push_back(read_tensor(join(dir, indexed("theta", s))));
        for (std::size_t k = 0; k < t.scanner_names.size(); ++k) {
            t.gamma.push_back(read_tensor(join(dir, indexed("gamma", k))));
            t.delta.push_back(read_tensor(join(dir, indexed("delta", k))));
        }
        for (std::size_t i = 0; i < j.at("n_subject").get<std::size_t>(); ++i)
            t.subject.push_back(read_tensor(join(dir, indexed("subject", i))));
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed truth manifest: ") + e.what());
    }
    return t;
}

void write_store(const std::string& path, const PosteriorStore& store) {
    BinaryWriter w;
    store.write(w);
    write_file_atomic(path, w.buffer());
}

PosteriorStore read_store(const std::string& path) {
    const auto bytes = read_file(path);
    BinaryReader r(bytes);
    auto s = PosteriorStore::read(r);
    if (!r.done()) throw DataError("trailing bytes in posterior store " + path);
    return s;
}

void write_harmonization(const std::string& dir, const HarmonizationOutput& out, const StudyDataset& data) {
    write_dataset(join(dir, "dataset"), out.apply_to(data));
    const auto params = join(dir, "params");
    ensure_dir(params);
    json j;
    j["method"] = out.method;
    j["config_hash"] = out.config_hash;
    j["seed"] = out.seed;
    j["draws"] = out.draws;
    j["warnings"] = out.warnings;
    j["scanner_names"] = data.scanner_names();
    std::size_t adjusted = 0;
    for (auto a : out.adjusted) adjusted += a;
    j["adjusted_voxels"] = adjusted;
    if (out.mu.size()) write_tensor(join(params, "mu.tht"), out.mu);
    for (std::size_t s = 0; s < out.theta.size(); ++s) write_tensor(join(params, indexed("theta", s)), out.theta[s]);
    for (std::size_t k = 0; k < out.gamma.size(); ++k) write_tensor(join(params, indexed("gamma", k)), out.gamma[k]);
    for (std::size_t k = 0; k < out.delta.size(); ++k) write_tensor(join(params, indexed("delta", k)), out.delta[k]);
    j["n_theta"] = out.theta.size();
    j["n_gamma"] = out.gamma.size();
    j["n_delta"] = out.delta.size();
    write_text(join(dir, "harmonization.json"), j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------

json load_json(const std::string& path) {
    const auto bytes = read_file(path);
    try {
        return json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
        throw ConfigError("cannot parse " + path + ": " + e.what());
    }
}

namespace {

/// Reads keys from a JSON object, rejecting unknown keys and wrong types.
class Fields {
public:
    Fields(const json& j, std::string what) : j_(j), what_(std::move(what)) {
        if (!j_.is_object()) throw ConfigError(what_ + " must be a JSON object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end() || it->is_null()) return;
        try {
            if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
                const bool ok = it->is_number_unsigned() || (it->is_number_integer() && it->template get<std::int64_t>() >= 0);
                if (!ok) throw ConfigError(what_ + "." + key + " must be a non-negative integer");
            } else if constexpr (std::is_same_v<T, bool>) {
                if (!it->is_boolean()) throw ConfigError(what_ + "." + key + " must be a boolean");
            } else if constexpr (std::is_same_v<T, double>) {
                if (!it->is_number()) throw ConfigError(what_ + "." + key + " must be a number");
            }
            out = it->template get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(what_ + "." + key + ": " + e.what());
        }
    }

    void optional_double(const char* key, std::optional<double>& out) {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end() || it->is_null()) return;
        if (!it->is_number()) throw ConfigError(what_ + "." + key + " must be a number or null");
        out = it->get<double>();
    }

    void finish() const {
        for (const auto& [key, _] : j_.items())
            if (!seen_.count(key)) throw ConfigError("unknown key in " + what_ + ": " + key);
    }

private:
    const json& j_;
    std::string what_;
    std::set<std::string> seen_;
};

}  // namespace

SamplerConfig sampler_config_from_json(const json& j) {
    SamplerConfig c;
    Fields f(j, "sampler config");
    f.get("rank", c.rank);
    f.get("n_mixture", c.n_mixture);
    f.get("iters", c.iters);
    f.get("burn_in", c.burn_in);
    f.get("thin", c.thin);
    f.get("a_tau", c.a_tau);
    f.get("b_tau", c.b_tau);
    f.get("a_lambda", c.a_lambda);
    f.get("b_lambda", c.b_lambda);
    f.get("a_eps", c.a_eps);
    f.optional_double("b_eps", c.b_eps);
    f.get("a_alpha", c.a_alpha);
    f.get("b_alpha", c.b_alpha);
    f.get("a_pi", c.a_pi);
    f.get("mh_proposal_var", c.mh_proposal_var);
    f.get("longitudinal", c.longitudinal);
    f.get("time_interactions", c.time_interactions);
    f.get("slice_axis", c.slice_axis);
    f.get("min_slice_fraction", c.min_slice_fraction);
    f.get("seed", c.seed);
    f.get("stream_id", c.stream_id);
    f.get("checkpoint_every", c.checkpoint_every);
    f.get("checkpoint_path", c.checkpoint_path);
    f.get("stop_after", c.stop_after);
    f.get("freeze_hyper", c.freeze_hyper);
    f.get("freeze_noise", c.freeze_noise);
    f.get("ols_warm_start", c.ols_warm_start);
    f.finish();
    c.validate();
    return c;
}

json to_json(const SamplerConfig& c) {
    return {{"rank", c.rank},
            {"n_mixture", c.n_mixture},
            {"iters", c.iters},
            {"burn_in", c.burn_in},
            {"thin", c.thin},
            {"a_tau", c.a_tau},
            {"b_tau", c.b_tau},
            {"a_lambda", c.a_lambda},
            {"b_lambda", c.b_lambda},
            {"a_eps", c.a_eps},
            {"b_eps", c.b_eps ? json(*c.b_eps) : json(nullptr)},
            {"a_alpha", c.a_alpha},
            {"b_alpha", c.b_alpha},
            {"a_pi", c.a_pi},
            {"mh_proposal_var", c.mh_proposal_var},
            {"longitudinal", c.longitudinal},
            {"time_interactions", c.time_interactions},
            {"slice_axis", c.slice_axis},
            {"min_slice_fraction", c.min_slice_fraction},
            {"seed", c.seed},
            {"stream_id", c.stream_id},
            {"checkpoint_every", c.checkpoint_every},
            {"checkpoint_path", c.checkpoint_path},
            {"stop_after", c.stop_after},
            {"freeze_hyper", c.freeze_hyper},
            {"freeze_noise", c.freeze_noise},
            {"ols_warm_start", c.ols_warm_start}};
}

SimConfig sim_config_from_json(const json& j) {
    SimConfig c;
    Fields f(j, "simulation config");
    std::vector<std::size_t> dims;
    f.get("dims", dims);
    if (!dims.empty()) {
        if (dims.size() < 2 || dims.size() > 3) throw ConfigError("dims must list 2 or 3 extents");
        c.dims = Dims(dims[0], dims[1], dims.size() == 3 ? dims[2] : 1);
    }
    f.get("subjects", c.subjects);
    f.get("scanners", c.scanners);
    f.get("visits", c.visits);
    f.get("visit_interval_months", c.visit_interval_months);
    f.get("covariates", c.covariates);
    f.get("binary_rate", c.binary_rate);
    f.get("effect_amplitudes", c.effect_amplitudes);
    f.get("age_per_visit", c.age_per_visit);
    f.get("mean_level", c.mean_level);
    f.get("mean_bump", c.mean_bump);
    f.get("gamma_rank", c.gamma_rank);
    f.get("gamma_amplitude", c.gamma_amplitude);
    f.get("block_amplitude", c.block_amplitude);
    f.get("block_fraction", c.block_fraction);
    f.get("delta_low", c.delta_low);
    f.get("delta_high", c.delta_high);
    f.get("snr", c.snr);
    f.optional_double("noise_sd", c.noise_sd);
    f.get("longitudinal", c.longitudinal);
    f.get("subject_sd", c.subject_sd);
    f.get("time_effect", c.time_effect);
    f.get("seed", c.seed);
    f.finish();
    c.validate();
    return c;
}

json to_json(const SimConfig& c) {
    return {{"dims", {c.dims[0], c.dims[1], c.dims[2]}},
            {"subjects", c.subjects},
            {"scanners", c.scanners},
            {"visits", c.visits},
            {"visit_interval_months", c.visit_interval_months},
            {"covariates", c.covariates},
            {"binary_rate", c.binary_rate},
            {"effect_amplitudes", c.effect_amplitudes},
            {"age_per_visit", c.age_per_visit},
            {"mean_level", c.mean_level},
            {"mean_bump", c.mean_bump},
            {"gamma_rank", c.gamma_rank},
            {"gamma_amplitude", c.gamma_amplitude},
            {"block_amplitude", c.block_amplitude},
            {"block_fraction", c.block_fraction},
            {"delta_low", c.delta_low},
            {"delta_high", c.delta_high},
            {"snr", c.snr},
            {"noise_sd", c.noise_sd ? json(*c.noise_sd) : json(nullptr)},
            {"longitudinal", c.longitudinal},
            {"subject_sd", c.subject_sd},
            {"time_effect", c.time_effect},
            {"seed", c.seed}};
}

json to_json(const CombatOptions& o) {
    return {{"empirical_bayes", o.empirical_bayes},
            {"tolerance", o.tolerance},
            {"max_iterations", o.max_iterations},
            {"delta_floor", o.delta_floor}};
}

CombatOptions combat_options_from_json(const json& j) {
    CombatOptions o;
    Fields f(j, "combat options");
    f.get("empirical_bayes", o.empirical_bayes);
    f.get("tolerance", o.tolerance);
    f.get("max_iterations", o.max_iterations);
    f.get("delta_floor", o.delta_floor);
    f.finish();
    if (!(o.tolerance > 0.0) || o.max_iterations == 0 || !(o.delta_floor > 0.0))
        throw ConfigError("combat options must be positive");
    return o;
}

// ---------------------------------------------------------------------------

void RunManifest::add_output_tree(const std::string& dir) {
    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) add_output(f);
}

json RunManifest::json() const {
    return {{"command", command}, {"config", config}, {"inputs", inputs}, {"outputs", outputs},
            {"seed", seed},       {"version", version}, {"timings", timings}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
    RunManifest m;
    try {
        m.command = j.at("command").get<std::string>();
        m.config = j.at("config");
        m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
        m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.version = j.at("version").get<std::string>();
        m.timings = j.at("timings").get<std::map<std::string, double>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed run manifest: ") + e.what());
    }
    return m;
}

void write_manifest(const std::string& path, const RunManifest& m) { write_text(path, m.json().dump(2) + "\n"); }

RunManifest read_manifest(const std::string& path) { return RunManifest::from_json(load_json(path)); }

void verify_manifest(const RunManifest& m) {
    for (const auto* group : {&m.inputs, &m.outputs})
        for (const auto& [path, hash] : *group) expect_hash(path, hash);
}

}  // namespace tcombat::io
