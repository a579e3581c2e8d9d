#include "mlopt/table.hpp"

#include <algorithm>
#include <sstream>

namespace mlopt {

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string render_csv(const TableRow& header, const std::vector<TableRow>& rows) {
  std::ostringstream os;
  auto line = [&](const TableRow& r) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i) os << ',';
      os << csv_field(r[i]);
    }
    os << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return os.str();
}

std::string render_markdown(const TableRow& header, const std::vector<TableRow>& rows) {
  std::vector<std::size_t> width(header.size(), 3);
  for (std::size_t i = 0; i < header.size(); ++i) width[i] = std::max(width[i], header[i].size());
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size() && i < width.size(); ++i) {
      width[i] = std::max(width[i], r[i].size());
    }
  }
  std::ostringstream os;
  auto line = [&](const TableRow& r) {
    os << '|';
    for (std::size_t i = 0; i < width.size(); ++i) {
      const std::string cell = i < r.size() ? r[i] : std::string();
      os << ' ' << cell << std::string(width[i] - cell.size(), ' ') << " |";
    }
    os << '\n';
  };
  line(header);
  os << '|';
  for (auto w : width) os << ' ' << std::string(w, '-') << " |";
  os << '\n';
  for (const auto& r : rows) line(r);
  return os.str();
}

TableRow parse_csv_line(const std::string& line) {
  TableRow out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

}  // namespace mlopt
