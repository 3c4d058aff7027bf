#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "feainf/errors.hpp"

namespace feainf {

/// Flat "key = value" configuration text. '#' starts a comment; blank lines
/// are ignored. Typed getters fall back to the given default when the key is
/// absent and throw DataError when a present value does not parse.
class Config {
public:
    static Config from_file(const std::string& path);
    static Config from_string(const std::string& text);

    bool has(const std::string& key) const { return kv_.count(key) > 0; }
    int get_int(const std::string& key, int fallback) const;
    double get_double(const std::string& key, double fallback) const;
    uint64_t get_u64(const std::string& key, uint64_t fallback) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;
    /// Comma-separated doubles.
    std::vector<double> get_list(const std::string& key, const std::vector<double>& fallback) const;

    /// Throws DataError naming the first key not in `known`.
    void check_known(const std::vector<std::string>& known) const;

private:
    std::map<std::string, std::string> kv_;
};

} // namespace feainf
