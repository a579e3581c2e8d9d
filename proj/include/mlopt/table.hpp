#pragma once

#include <string>
#include <vector>

namespace mlopt {

using TableRow = std::vector<std::string>;

/// Comma-separated rows; fields containing commas or quotes are quoted.
std::string render_csv(const TableRow& header, const std::vector<TableRow>& rows);
/// Pipe table with columns padded to equal width.
std::string render_markdown(const TableRow& header, const std::vector<TableRow>& rows);
/// Splits one CSV line, honouring double-quoted fields.
TableRow parse_csv_line(const std::string& line);

}  // namespace mlopt
