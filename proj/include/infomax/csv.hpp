#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace infomax {

// CSV dialect used everywhere: comma separator, '.' decimal point, "\n" line
// ends, mandatory header row. Floats are printed with %.10g so identical runs
// produce byte-identical files.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
      : os_(path, std::ios::binary) {
    if (!os_) throw std::runtime_error("csv: cannot open for write: " + path.string());
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i) os_ << ',';
      os_ << header[i];
    }
    os_ << '\n';
    columns_ = header.size();
  }

  CsvWriter& field(const std::string& v) {
    sep();
    os_ << v;
    return *this;
  }

  CsvWriter& field(std::int64_t v) {
    sep();
    os_ << v;
    return *this;
  }

  CsvWriter& field(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    sep();
    os_ << buf;
    return *this;
  }

  void end_row() {
    if (in_row_ != columns_)
      throw std::logic_error("csv: row has " + std::to_string(in_row_) + " fields, header has " +
                             std::to_string(columns_));
    os_ << '\n';
    in_row_ = 0;
  }

  void flush() { os_.flush(); }

 private:
  void sep() {
    if (in_row_) os_ << ',';
    ++in_row_;
  }

  std::ofstream os_;
  std::size_t columns_ = 0;
  std::size_t in_row_ = 0;
};

inline std::string format_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace infomax
