#include "caal/common.hpp"

#include <cstdio>
#include <iostream>

namespace caal {

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

void warnf(const std::string& msg) { std::cerr << "warning: " << msg << std::endl; }

}  // namespace caal
