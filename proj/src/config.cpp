#include "trisparse/config.hpp"

#include <charconv>
#include <iomanip>
#include <sstream>

namespace trisparse {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("'" + key + "': invalid number '" + v + "'");
    return out;
}

}  // namespace

std::vector<ConfigEntry> parse_config_text(const std::string& text) {
    std::vector<ConfigEntry> out;
    std::istringstream is(text);
    std::size_t line_no = 0;
    for (std::string line; std::getline(is, line);) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
        ConfigEntry e{trim(line.substr(0, eq)), trim(line.substr(eq + 1)), line_no};
        if (e.key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
        out.push_back(std::move(e));
    }
    return out;
}

void apply_config(const std::vector<ConfigEntry>& entries, const std::vector<ConfigField>& fields) {
    for (const auto& e : entries) {
        const ConfigField* field = nullptr;
        for (const auto& f : fields)
            if (f.key == e.key) field = &f;
        if (!field) throw ConfigError("line " + std::to_string(e.line) + ": unknown key '" + e.key + "'");
        try {
            field->set(e.value);
        } catch (const ConfigError& err) {
            throw ConfigError("line " + std::to_string(e.line) + ": " + err.what());
        }
    }
}

std::string render_config(const std::vector<ConfigField>& fields) {
    std::string out;
    for (const auto& f : fields) out += f.key + " = " + f.get() + "\n";
    return out;
}

std::string describe_config(const std::vector<ConfigField>& fields) {
    std::ostringstream os;
    for (const auto& f : fields) os << "  " << std::left << std::setw(26) << f.key << " default " << std::setw(12) << f.get() << ' ' << f.doc << '\n';
    return os.str();
}

ConfigField int_field(std::string key, std::string doc, long& target, long min_value) {
    const std::string k = key;
    return {std::move(key), std::move(doc), [&target] { return std::to_string(target); },
            [&target, k, min_value](const std::string& v) {
                const long n = parse_number<long>(k, v);
                if (n < min_value) throw ConfigError("'" + k + "' must be >= " + std::to_string(min_value));
                target = n;
            }};
}

ConfigField size_field(std::string key, std::string doc, std::size_t& target, std::size_t min_value) {
    const std::string k = key;
    return {std::move(key), std::move(doc), [&target] { return std::to_string(target); },
            [&target, k, min_value](const std::string& v) {
                const auto n = parse_number<std::size_t>(k, v);
                if (n < min_value) throw ConfigError("'" + k + "' must be >= " + std::to_string(min_value));
                target = n;
            }};
}

ConfigField u64_field(std::string key, std::string doc, std::uint64_t& target) {
    const std::string k = key;
    return {std::move(key), std::move(doc), [&target] { return std::to_string(target); },
            [&target, k](const std::string& v) { target = parse_number<std::uint64_t>(k, v); }};
}

ConfigField real_field(std::string key, std::string doc, double& target) {
    const std::string k = key;
    return {std::move(key), std::move(doc), [&target] { return format_real(target); },
            [&target, k](const std::string& v) { target = parse_number<double>(k, v); }};
}

ConfigField bool_field(std::string key, std::string doc, bool& target) {
    const std::string k = key;
    return {std::move(key), std::move(doc), [&target] { return std::string(target ? "true" : "false"); },
            [&target, k](const std::string& v) {
                if (v == "true" || v == "1") target = true;
                else if (v == "false" || v == "0") target = false;
                else throw ConfigError("'" + k + "' expects true or false, got '" + v + "'");
            }};
}

ConfigField string_field(std::string key, std::string doc, std::string& target) {
    return {std::move(key), std::move(doc), [&target] { return target; }, [&target](const std::string& v) { target = v; }};
}

std::string format_real(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

}  // namespace trisparse
