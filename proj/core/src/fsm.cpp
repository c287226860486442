#include "ssn/fsm.hpp"

#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

namespace ssn::fsm {

std::string to_string(CaVariant v) {
  return v == CaVariant::kSigmoid ? "sigmoid" : "softplus_normalized";
}

CaVariant parse_ca_variant(const std::string& s) {
  if (s == "sigmoid") return CaVariant::kSigmoid;
  if (s == "softplus_normalized" || s == "softplus") return CaVariant::kSoftplusNormalized;
  throw ConfigError("unknown attention variant '" + s + "' (expected sigmoid|softplus_normalized)");
}

ParamCounts fsm_param_count(std::int64_t channels, std::int64_t shift_channels) {
  if (channels < 1 || shift_channels < 1) throw ConfigError("fsm_param_count: C and K must be >= 1");
  const std::int64_t c = channels, k = shift_channels;
  return {3 * k * c + 2 * k, k * c * c + 2 * k, k * c * c + 2 * k * c};
}

void write_offsets_csv(std::ostream& os, const std::vector<OffsetRow>& rows) {
  os << "module_id,k,dx,dy\n";
  char buf[96];
  for (const OffsetRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.9g,%.9g\n", r.module_id, r.k, r.dx, r.dy);
    os << buf;
  }
}

std::vector<OffsetRow> read_offsets_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "module_id,k,dx,dy") {
    throw FormatError("offset table: missing header 'module_id,k,dx,dy'");
  }
  std::vector<OffsetRow> rows;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    OffsetRow r;
    char tail = 0;
    if (std::sscanf(line.c_str(), "%d,%d,%lf,%lf%c", &r.module_id, &r.k, &r.dx, &r.dy, &tail) != 4) {
      throw FormatError("offset table line " + std::to_string(line_no) + ": expected 4 fields");
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace ssn::fsm
