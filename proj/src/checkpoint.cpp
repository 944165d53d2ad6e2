#include "eralab/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "eralab/errors.hpp"
#include "eralab/rng.hpp"

namespace eralab {

using nlohmann::json;

std::size_t Checkpoint::token_for(std::size_t concept_index) const {
    const auto it = sampling_tokens.find(concept_index);
    return it == sampling_tokens.end() ? concept_index : it->second;
}

std::string fnv1a_hex(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string config_hash(const json& config) {
    return fnv1a_hex(config.dump());
}

Provenance root_provenance(std::string stage, std::uint64_t seed, const json& config) {
    Provenance p;
    p.stage = std::move(stage);
    p.seed = seed;
    p.config_hash = config_hash(config);
    p.generator = std::string(Rng::generator_name);
    p.id = fnv1a_hex(p.stage + "|" + std::to_string(seed) + "|" + p.config_hash);
    return p;
}

Provenance child_provenance(const Provenance& parent, std::string stage, std::uint64_t seed, const json& config) {
    Provenance p = root_provenance(std::move(stage), seed, config);
    p.parent = parent.id;
    p.lineage = parent.lineage;
    p.lineage.push_back({parent.id, parent.stage});
    p.id = fnv1a_hex(parent.id + "|" + p.stage + "|" + std::to_string(seed) + "|" + p.config_hash);
    return p;
}

namespace {

json matrix_to_json(const Matrix& m) {
    json rows = json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto row = m.row(r);
        rows.push_back(json(Vector(row.begin(), row.end())));
    }
    return rows;
}

[[noreturn]] void fail(const std::string& field, const std::string& what) {
    throw FormatError("checkpoint field '" + field + "': " + what);
}

const json& member(const json& obj, const std::string& key, const std::string& path) {
    if (!obj.is_object()) {
        fail(path, "expected an object");
    }
    const auto it = obj.find(key);
    if (it == obj.end()) {
        fail(path.empty() ? key : path + "." + key, "missing");
    }
    return *it;
}

std::size_t read_count(const json& v, const std::string& field) {
    if (!v.is_number_integer() || v.get<long long>() < 0) {
        fail(field, "expected a non-negative integer");
    }
    return v.get<std::size_t>();
}

double read_double(const json& v, const std::string& field) {
    if (!v.is_number()) {
        fail(field, "expected a number");
    }
    return v.get<double>();
}

Vector read_vector(const json& v, const std::string& field, std::size_t expected) {
    if (!v.is_array()) {
        fail(field, "expected an array");
    }
    if (v.size() != expected) {
        fail(field, "expected " + std::to_string(expected) + " values, got " + std::to_string(v.size()));
    }
    Vector out;
    out.reserve(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(read_double(v[i], field + "[" + std::to_string(i) + "]"));
    }
    return out;
}

Matrix read_matrix(const json& v, const std::string& field, std::size_t rows, std::size_t cols) {
    if (!v.is_array()) {
        fail(field, "expected an array of rows");
    }
    if (v.size() != rows) {
        fail(field, "expected " + std::to_string(rows) + " rows, got " + std::to_string(v.size()));
    }
    Matrix m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const Vector row = read_vector(v[r], field + "[" + std::to_string(r) + "]", cols);
        std::copy(row.begin(), row.end(), m.row(r).begin());
    }
    return m;
}

std::string read_string(const json& v, const std::string& field) {
    if (!v.is_string()) {
        fail(field, "expected a string");
    }
    return v.get<std::string>();
}

} // namespace

json checkpoint_to_json(const Checkpoint& checkpoint) {
    const ConditionalDenoiser& m = checkpoint.model;
    json doc;
    doc["version"] = kCheckpointVersion;
    std::vector<std::size_t> hidden;
    for (std::size_t i = 0; i + 1 < m.mlp().layers().size(); ++i) {
        hidden.push_back(m.mlp().layers()[i].out_dim());
    }
    doc["dims"] = {{"data", m.data_dim()},
                   {"embedding", m.embedding_dim()},
                   {"time", m.time_dim()},
                   {"hidden", hidden},
                   {"tokens", m.token_count()}};
    doc["K"] = m.concept_count();
    doc["schedule"] = {{"steps", m.schedule().steps},
                       {"beta_start", m.schedule().beta_start},
                       {"beta_end", m.schedule().beta_end}};
    doc["embeddings"] = matrix_to_json(m.embeddings());
    json layers = json::array();
    for (const DenseLayer& layer : m.mlp().layers()) {
        layers.push_back({{"weight", matrix_to_json(layer.weight)}, {"bias", layer.bias}});
    }
    doc["layers"] = layers;
    const Provenance& p = checkpoint.provenance;
    json lineage = json::array();
    for (const LineageEntry& e : p.lineage) {
        lineage.push_back({{"id", e.id}, {"stage", e.stage}});
    }
    doc["provenance"] = {{"id", p.id},
                         {"parent", p.parent},
                         {"stage", p.stage},
                         {"seed", p.seed},
                         {"config_hash", p.config_hash},
                         {"generator", p.generator},
                         {"lineage", lineage}};
    json tokens = json::object();
    for (const auto& [c, t] : checkpoint.sampling_tokens) {
        tokens[std::to_string(c)] = t;
    }
    doc["sampling_tokens"] = tokens;
    return doc;
}

Checkpoint checkpoint_from_json(const json& doc) {
    if (!doc.is_object()) {
        throw FormatError("checkpoint must be a JSON object");
    }
    const auto version_it = doc.find("version");
    if (version_it == doc.end() || !version_it->is_string() || version_it->get<std::string>() != kCheckpointVersion) {
        const std::string got = version_it == doc.end() ? "<missing>" : version_it->dump();
        throw FormatError("unsupported checkpoint version " + got + " (expected \"" + std::string(kCheckpointVersion) +
                          "\")");
    }
    const json& dims = member(doc, "dims", "");
    const std::size_t data_dim = read_count(member(dims, "data", "dims"), "dims.data");
    const std::size_t emb_dim = read_count(member(dims, "embedding", "dims"), "dims.embedding");
    const std::size_t time_dim = read_count(member(dims, "time", "dims"), "dims.time");
    const std::size_t tokens = read_count(member(dims, "tokens", "dims"), "dims.tokens");
    const std::size_t k = read_count(member(doc, "K", ""), "K");
    if (tokens < k + 1) {
        fail("dims.tokens", "needs at least K + 1 rows (concepts plus null token)");
    }

    const json& sched = member(doc, "schedule", "");
    const std::size_t steps = read_count(member(sched, "steps", "schedule"), "schedule.steps");
    const double beta_start = read_double(member(sched, "beta_start", "schedule"), "schedule.beta_start");
    const double beta_end = read_double(member(sched, "beta_end", "schedule"), "schedule.beta_end");
    NoiseSchedule schedule;
    try {
        schedule = make_schedule(static_cast<int>(steps), beta_start, beta_end);
    } catch (const Error& e) {
        fail("schedule", e.what());
    }

    Matrix embeddings = read_matrix(member(doc, "embeddings", ""), "embeddings", tokens, emb_dim);

    const json& layers_json = member(doc, "layers", "");
    if (!layers_json.is_array() || layers_json.empty()) {
        fail("layers", "expected a non-empty array");
    }
    std::vector<DenseLayer> layers;
    std::size_t in_dim = data_dim + emb_dim + time_dim;
    for (std::size_t i = 0; i < layers_json.size(); ++i) {
        const std::string name = "layers[" + std::to_string(i) + "]";
        const json& lj = layers_json[i];
        const json& wj = member(lj, "weight", name);
        const json& bj = member(lj, "bias", name);
        if (!wj.is_array() || wj.empty() || !wj[0].is_array()) {
            fail(name + ".weight", "expected a non-empty array of rows");
        }
        const std::size_t out_dim = wj.size();
        if (wj[0].size() != in_dim) {
            fail(name + ".weight", "expected " + std::to_string(in_dim) + " columns, got " +
                                       std::to_string(wj[0].size()));
        }
        DenseLayer layer;
        layer.weight = read_matrix(wj, name + ".weight", out_dim, in_dim);
        layer.bias = read_vector(bj, name + ".bias", out_dim);
        layers.push_back(std::move(layer));
        in_dim = out_dim;
    }
    if (in_dim != data_dim) {
        fail("layers[" + std::to_string(layers.size() - 1) + "].weight",
             "output dimension " + std::to_string(in_dim) + " does not match dims.data = " + std::to_string(data_dim));
    }
    if (const auto hidden_it = dims.find("hidden"); hidden_it != dims.end()) {
        if (!hidden_it->is_array() || hidden_it->size() + 1 != layers.size()) {
            fail("dims.hidden", "does not match the number of layers");
        }
        for (std::size_t i = 0; i < hidden_it->size(); ++i) {
            if (!(*hidden_it)[i].is_number_integer() || (*hidden_it)[i].get<std::size_t>() != layers[i].out_dim()) {
                fail("dims.hidden[" + std::to_string(i) + "]", "does not match layers[" + std::to_string(i) + "]");
            }
        }
    }

    Checkpoint ckpt{ConditionalDenoiser(std::move(schedule), Mlp(std::move(layers)), std::move(embeddings), k, time_dim),
                    {}, {}};

    if (const auto prov_it = doc.find("provenance"); prov_it != doc.end()) {
        const json& pj = *prov_it;
        Provenance& p = ckpt.provenance;
        p.id = read_string(member(pj, "id", "provenance"), "provenance.id");
        p.parent = read_string(member(pj, "parent", "provenance"), "provenance.parent");
        p.stage = read_string(member(pj, "stage", "provenance"), "provenance.stage");
        const json& seed = member(pj, "seed", "provenance");
        if (!seed.is_number_unsigned()) {
            fail("provenance.seed", "expected a non-negative integer");
        }
        p.seed = seed.get<std::uint64_t>();
        p.config_hash = read_string(member(pj, "config_hash", "provenance"), "provenance.config_hash");
        p.generator = read_string(member(pj, "generator", "provenance"), "provenance.generator");
        const json& lineage = member(pj, "lineage", "provenance");
        if (!lineage.is_array()) {
            fail("provenance.lineage", "expected an array");
        }
        for (std::size_t i = 0; i < lineage.size(); ++i) {
            const std::string name = "provenance.lineage[" + std::to_string(i) + "]";
            p.lineage.push_back({read_string(member(lineage[i], "id", name), name + ".id"),
                                 read_string(member(lineage[i], "stage", name), name + ".stage")});
        }
    }
    if (const auto tok_it = doc.find("sampling_tokens"); tok_it != doc.end()) {
        if (!tok_it->is_object()) {
            fail("sampling_tokens", "expected an object");
        }
        for (const auto& [key, value] : tok_it->items()) {
            const std::string name = "sampling_tokens." + key;
            std::size_t c = 0;
            try {
                std::size_t used = 0;
                c = std::stoul(key, &used);
                if (used != key.size()) {
                    throw std::invalid_argument(key);
                }
            } catch (const std::exception&) {
                fail(name, "key must be a concept index");
            }
            const std::size_t t = read_count(value, name);
            if (c >= k || t >= tokens) {
                fail(name, "index out of range");
            }
            ckpt.sampling_tokens[c] = t;
        }
    }
    return ckpt;
}

void write_text(const std::filesystem::path& path, std::string_view text) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot open '" + path.string() + "' for writing");
    }
    out << text;
    if (!out) {
        throw Error("failed writing '" + path.string() + "'");
    }
}

void write_json(const std::filesystem::path& path, const json& doc) {
    write_text(path, doc.dump(2) + "\n");
}

json read_json(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot open '" + path.string() + "'");
    }
    std::ostringstream text;
    text << in.rdbuf();
    try {
        return json::parse(text.str());
    } catch (const json::parse_error& e) {
        throw FormatError("malformed JSON in '" + path.string() + "': " + e.what());
    }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    write_text(path, checkpoint_to_json(checkpoint).dump() + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return checkpoint_from_json(read_json(path));
}

} // namespace eralab
