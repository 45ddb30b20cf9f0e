#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "caal/common.hpp"

namespace caal {

std::string csv_escape(const std::string& field);
std::vector<std::string> csv_split_line(const std::string& line);

// whole-file reader; first row is returned too (callers check the header)
std::vector<std::vector<std::string>> read_csv(const std::string& path);

class CsvWriter {
public:
    explicit CsvWriter(const std::string& path);
    void row(const std::vector<std::string>& fields);
    void close();

private:
    std::ofstream os_;
    std::string path_;
};

// fixed-format float for CSV/JSON fields so reruns emit identical bytes
std::string fmt_double(double v, int digits = 12);

}  // namespace caal
