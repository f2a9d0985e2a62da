#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace mipd {

/// RFC 4180 style: quoted cells may hold commas and doubled quotes.
std::vector<std::string> split_csv_line(const std::string& line);

/// Empty cell = kMissing. Errors name the 1-based data row and the column.
double parse_csv_number(const std::string& cell, std::size_t row, const std::string& column);

struct RawCsv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

/// Header plus non-blank rows; strips a UTF-8 BOM.
RawCsv read_raw(const std::filesystem::path& path);

}  // namespace mipd
