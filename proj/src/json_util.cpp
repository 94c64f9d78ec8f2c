#include "kvedit/json_util.hpp"

#include "kvedit/errors.hpp"

#include <fstream>

namespace kvedit {

nlohmann::json vector_to_json(const Vector& v) {
    nlohmann::json j = nlohmann::json::array();
    for (Index i = 0; i < v.size(); ++i) j.push_back(v(i));
    return j;
}

Vector vector_from_json(const nlohmann::json& j) {
    if (!j.is_array()) throw MalformedDump("expected a JSON array of numbers");
    Vector v(static_cast<Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Index>(i)) = j[i].get<double>();
    return v;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw MalformedDump(path.string() + ": " + e.what());
    }
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << j.dump(2) << '\n';
}

void reject_unknown_keys(const nlohmann::json& given, const nlohmann::json& reference, const std::string& where) {
    if (!given.is_object()) throw ConfigMismatch(where + " must be a JSON object");
    for (const auto& [key, value] : given.items()) {
        if (!reference.contains(key)) throw ConfigMismatch("unknown " + where + " key '" + key + "'");
        if (reference.at(key).is_object()) reject_unknown_keys(value, reference.at(key), where + "." + key);
    }
}

}  // namespace kvedit
