#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "caal/common.hpp"

namespace caal {

// Flat `section.key=value` configuration. Every key is declared in the
// registry with its default and a one-line doc; unknown keys are rejected so
// typos can't silently fall back to defaults. A run freezes its fully
// resolved config (sorted, one key per line) next to its outputs.
class Config {
public:
    struct KeySpec {
        const char* key;
        const char* def;
        const char* doc;
    };

    static const std::vector<KeySpec>& registry();
    static Config defaults();

    void set(const std::string& key, const std::string& value);
    void load_file(const std::string& path);
    void apply_overrides(const std::vector<std::string>& kvs);  // "a.b=c" forms

    const std::string& str(const std::string& key) const;
    double num(const std::string& key) const;
    int64_t integer(const std::string& key) const;
    bool flag(const std::string& key) const;
    std::vector<std::string> list(const std::string& key) const;
    std::vector<double> nums(const std::string& key) const;

    void freeze_to(const std::string& path) const;
    std::string frozen_text() const;
    uint64_t hash() const;

    static void print_help(std::ostream& os);

private:
    std::map<std::string, std::string> values_;
};

}  // namespace caal
