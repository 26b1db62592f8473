#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "trisparse/error.hpp"

namespace trisparse {

/// One documented key of a flat key=value configuration.
struct ConfigField {
    std::string key;
    std::string doc;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
};

struct ConfigEntry {
    std::string key;
    std::string value;
    std::size_t line = 0;
};

/// Parses `key = value` lines; '#' starts a comment; blank lines are ignored.
std::vector<ConfigEntry> parse_config_text(const std::string& text);

/// Applies entries to the matching fields. Unknown keys and bad values are
/// ConfigErrors naming the line.
void apply_config(const std::vector<ConfigEntry>& entries, const std::vector<ConfigField>& fields);

/// key=value lines for every field, in field order.
std::string render_config(const std::vector<ConfigField>& fields);

/// "key  (default: v)  doc" lines for --help.
std::string describe_config(const std::vector<ConfigField>& fields);

// Field builders for common value types.
ConfigField int_field(std::string key, std::string doc, long& target, long min_value);
ConfigField size_field(std::string key, std::string doc, std::size_t& target, std::size_t min_value);
ConfigField u64_field(std::string key, std::string doc, std::uint64_t& target);
ConfigField real_field(std::string key, std::string doc, double& target);
ConfigField bool_field(std::string key, std::string doc, bool& target);
ConfigField string_field(std::string key, std::string doc, std::string& target);

/// Enumerations: `to` renders, `from` parses (throwing ConfigError).
template <typename E>
ConfigField enum_field(std::string key, std::string doc, E& target, std::function<std::string(E)> to,
                       std::function<E(const std::string&)> from) {
    return {std::move(key), std::move(doc), [&target, to] { return to(target); },
            [&target, from](const std::string& v) { target = from(v); }};
}

/// Shortest decimal text that reads back to the same double.
std::string format_real(double v);

}  // namespace trisparse
