#include "mipd/csv.hpp"

#include <charconv>
#include <cmath>
#include <fstream>

#include "mipd/error.hpp"
#include "mipd/table.hpp"

namespace mipd {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cell += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cell));
      cell.clear();
    } else if (c != '\r') {
      cell += c;
    }
  }
  cells.push_back(std::move(cell));
  return cells;
}

double parse_csv_number(const std::string& cell, std::size_t row, const std::string& column) {
  if (cell.empty()) return kMissing;
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw Error(Errc::malformed_numeric, "row " + std::to_string(row) + ": malformed numeric value '" +
                                             cell + "' in column " + column);
  }
  return v;
}

RawCsv read_raw(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  RawCsv raw;
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::missing_column, path.string() + ": missing header row");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  raw.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    raw.rows.push_back(split_csv_line(line));
  }
  return raw;
}

}  // namespace mipd
