#include "mlopt/gridopf.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>
#include <fmt/format.h>
#include <json.hpp>

namespace mlopt {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

std::string default_label(const Contingency& c) {
  std::vector<std::string> parts;
  for (auto g : c.generators) parts.push_back(fmt::format("gen{}", g + 1));
  for (auto b : c.branches) parts.push_back(fmt::format("branch{}", b + 1));
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : "+") + p;
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// GridCase

std::size_t GridCase::bus_index(int id) const {
  for (std::size_t i = 0; i < buses.size(); ++i) {
    if (buses[i].id == id) return i;
  }
  throw CaseError(fmt::format("unknown bus id {}", id));
}

std::size_t GridCase::ref_bus() const {
  std::size_t found = buses.size();
  for (std::size_t i = 0; i < buses.size(); ++i) {
    if (buses[i].type != BusType::Ref) continue;
    if (found != buses.size()) throw CaseError("more than one reference bus");
    found = i;
  }
  if (found == buses.size()) throw CaseError("missing reference bus");
  return found;
}

bool GridCase::connected() const {
  if (buses.empty()) return true;
  std::vector<std::size_t> parent(buses.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (const auto& br : branches) {
    if (!br.in_service) continue;
    parent[find(bus_index(br.from))] = find(bus_index(br.to));
  }
  const auto root = find(0);
  for (std::size_t i = 1; i < buses.size(); ++i) {
    if (find(i) != root) return false;
  }
  return true;
}

void GridCase::validate() const {
  if (buses.empty()) throw CaseError("case has no buses");
  if (!(base_mva > 0.0)) throw CaseError("base MVA must be positive");
  for (std::size_t i = 0; i < buses.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (buses[i].id == buses[j].id) throw CaseError(fmt::format("duplicate bus id {}", buses[i].id));
    }
    const auto& b = buses[i];
    if (!(b.vmin > 0.0 && b.vmin < b.vmax)) {
      throw CaseError(fmt::format("bus {}: voltage bounds must satisfy 0 < vmin < vmax", b.id));
    }
  }
  const auto ref = ref_bus();
  bool ref_gen = false;
  for (std::size_t g = 0; g < generators.size(); ++g) {
    const auto& gen = generators[g];
    const auto bi = bus_index(gen.bus);
    if (gen.pmin > gen.pmax || gen.qmin > gen.qmax) {
      throw CaseError(fmt::format("generator {}: bounds out of order", g + 1));
    }
    if (!(gen.h > 0.0) || gen.d < 0.0 || !(gen.xdp > 0.0)) {
      throw CaseError(fmt::format("generator {}: invalid dynamic data", g + 1));
    }
    if (bi == ref && gen.in_service) ref_gen = true;
  }
  if (!ref_gen) throw CaseError("reference bus has no in-service generator");
  for (std::size_t k = 0; k < branches.size(); ++k) {
    const auto& br = branches[k];
    bus_index(br.from);
    bus_index(br.to);
    if (br.r == 0.0 && br.x == 0.0) throw CaseError(fmt::format("branch {}: zero impedance", k + 1));
    if (!(br.ratio > 0.0)) throw CaseError(fmt::format("branch {}: tap ratio must be positive", k + 1));
  }
  if (!connected()) throw CaseError("network is disconnected");
  for (const auto& c : contingencies) with_outage(c);
}

GridCase GridCase::with_outage(const Contingency& c) const {
  GridCase out = *this;
  out.contingencies.clear();
  for (auto g : c.generators) {
    if (g >= generators.size()) throw CaseError(fmt::format("contingency references generator {}", g + 1));
    out.generators[g].in_service = false;
  }
  for (auto b : c.branches) {
    if (b >= branches.size()) throw CaseError(fmt::format("contingency references branch {}", b + 1));
    out.branches[b].in_service = false;
  }
  if (!out.connected()) {
    throw CaseError(fmt::format("contingency '{}' islands the network", c.label));
  }
  const auto ref = out.ref_bus();
  const bool live = std::any_of(out.generators.begin(), out.generators.end(), [&](const auto& g) {
    return g.in_service && out.bus_index(g.bus) == ref;
  });
  if (!live) throw CaseError(fmt::format("contingency '{}' removes every reference generator", c.label));
  return out;
}

// ---------------------------------------------------------------------------
// Readers

GridCase parse_case(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CaseError("cannot open case file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  const auto dot = path.rfind('.');
  const std::string ext = dot == std::string::npos ? "" : path.substr(dot);
  if (ext == ".json") return parse_case_json(ss.str());
  if (ext == ".m") return parse_case_matpower(ss.str());
  throw CaseError("unrecognized case extension '" + ext + "' (.json or .m)");
}

GridCase parse_case_json(const std::string& text) {
  using nlohmann::json;
  GridCase c;
  try {
    const json doc = json::parse(text);
    if (doc.value("version", 1) != 1) throw CaseError("unsupported case schema version");
    c.name = doc.value("name", std::string("case"));
    c.base_mva = doc.value("base_mva", 100.0);
    c.frequency = doc.value("frequency_hz", 60.0);
    for (const auto& b : doc.at("buses")) {
      Bus bus;
      bus.id = b.at("id").get<int>();
      const auto type = b.value("type", std::string("pq"));
      if (type == "pq") {
        bus.type = BusType::PQ;
      } else if (type == "pv") {
        bus.type = BusType::PV;
      } else if (type == "ref") {
        bus.type = BusType::Ref;
      } else {
        throw CaseError("bus type must be pq, pv or ref");
      }
      bus.pd = b.value("pd", 0.0);
      bus.qd = b.value("qd", 0.0);
      bus.gs = b.value("gs", 0.0);
      bus.bs = b.value("bs", 0.0);
      bus.vmin = b.at("vmin").get<double>();
      bus.vmax = b.at("vmax").get<double>();
      bus.vm = b.value("vm", 1.0);
      bus.va = b.value("va_deg", 0.0) * kDeg;
      c.buses.push_back(bus);
    }
    for (const auto& g : doc.at("generators")) {
      Generator gen;
      gen.bus = g.at("bus").get<int>();
      gen.pg = g.value("pg", 0.0);
      gen.qg = g.value("qg", 0.0);
      gen.pmin = g.at("pmin").get<double>();
      gen.pmax = g.at("pmax").get<double>();
      gen.qmin = g.at("qmin").get<double>();
      gen.qmax = g.at("qmax").get<double>();
      gen.vg = g.value("vg", 1.0);
      const auto cost = g.at("cost").get<std::vector<double>>();
      if (cost.size() != 3) throw CaseError("generator cost must be [c2, c1, c0]");
      gen.c2 = cost[0];
      gen.c1 = cost[1];
      gen.c0 = cost[2];
      gen.h = g.value("h", 5.0);
      gen.d = g.value("d", 0.0);
      gen.xdp = g.value("xdp", 0.25);
      gen.in_service = g.value("in_service", true);
      c.generators.push_back(gen);
    }
    for (const auto& b : doc.at("branches")) {
      Branch br;
      br.from = b.at("from").get<int>();
      br.to = b.at("to").get<int>();
      br.r = b.value("r", 0.0);
      br.x = b.value("x", 0.0);
      br.b = b.value("b", 0.0);
      br.rate = b.value("rate", 0.0);
      br.ratio = b.value("ratio", 1.0);
      br.shift = b.value("shift_deg", 0.0) * kDeg;
      br.in_service = b.value("in_service", true);
      c.branches.push_back(br);
    }
    if (doc.contains("contingencies")) {
      for (const auto& k : doc.at("contingencies")) {
        Contingency con;
        for (auto g : k.value("generators", std::vector<std::size_t>{})) {
          if (g == 0) throw CaseError("contingency element numbers are 1-based");
          con.generators.push_back(g - 1);
        }
        for (auto b : k.value("branches", std::vector<std::size_t>{})) {
          if (b == 0) throw CaseError("contingency element numbers are 1-based");
          con.branches.push_back(b - 1);
        }
        con.label = k.value("label", default_label(con));
        c.contingencies.push_back(con);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw CaseError(std::string("case schema violation: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

using Matrix = std::vector<std::vector<double>>;

// Returns the numeric rows of `mpc.<name> = [ ... ];`, or nothing when absent.
bool matpower_matrix(const std::string& text, const std::string& name, Matrix& out) {
  const std::string key = "mpc." + name;
  std::size_t pos = 0;
  for (;;) {
    pos = text.find(key, pos);
    if (pos == std::string::npos) return false;
    std::size_t after = pos + key.size();
    while (after < text.size() && std::isspace(static_cast<unsigned char>(text[after]))) ++after;
    if (after < text.size() && text[after] == '=') {
      pos = after + 1;
      break;
    }
    pos = after;
  }
  const auto open = text.find('[', pos);
  const auto close = text.find(']', open);
  if (open == std::string::npos || close == std::string::npos) {
    throw CaseError("unterminated matrix mpc." + name);
  }
  out.clear();
  std::vector<double> row;
  std::size_t i = open + 1;
  auto flush = [&] {
    if (!row.empty()) out.push_back(row);
    row.clear();
  };
  while (i < close) {
    const char ch = text[i];
    if (ch == '%') {
      while (i < close && text[i] != '\n') ++i;
    } else if (ch == ';' || ch == '\n') {
      flush();
      ++i;
    } else if (std::isspace(static_cast<unsigned char>(ch)) || ch == ',') {
      ++i;
    } else {
      std::size_t used = 0;
      try {
        row.push_back(std::stod(text.substr(i, close - i), &used));
      } catch (const std::exception&) {
        throw CaseError(fmt::format("bad number in mpc.{} near '{}'", name,
                                    text.substr(i, std::min<std::size_t>(12, close - i))));
      }
      i += used;
    }
  }
  flush();
  return true;
}

bool matpower_scalar(const std::string& text, const std::string& name, double& out) {
  const std::string key = "mpc." + name;
  const auto pos = text.find(key);
  if (pos == std::string::npos) return false;
  const auto eq = text.find('=', pos);
  if (eq == std::string::npos) throw CaseError("malformed mpc." + name);
  try {
    out = std::stod(text.substr(eq + 1));
  } catch (const std::exception&) {
    throw CaseError("malformed mpc." + name);
  }
  return true;
}

void require_columns(const Matrix& m, std::size_t n, const std::string& name) {
  for (const auto& r : m) {
    if (r.size() < n) throw CaseError(fmt::format("mpc.{} rows need at least {} columns", name, n));
  }
}

}  // namespace

GridCase parse_case_matpower(const std::string& raw) {
  // Strip comments outside matrices as well.
  std::string text;
  {
    std::istringstream in(raw);
    for (std::string line; std::getline(in, line);) {
      const auto pct = line.find('%');
      text += line.substr(0, pct) + "\n";
    }
  }
  GridCase c;
  {
    const auto fn = text.find("function");
    if (fn != std::string::npos) {
      const auto eq = text.find('=', fn);
      auto end = text.find_first_of(";\n(", eq);
      std::string name = text.substr(eq + 1, end - eq - 1);
      name.erase(std::remove_if(name.begin(), name.end(), ::isspace), name.end());
      c.name = name;
    } else {
      c.name = "case";
    }
  }
  if (!matpower_scalar(text, "baseMVA", c.base_mva)) throw CaseError("missing mpc.baseMVA");
  matpower_scalar(text, "frequency", c.frequency);
  Matrix bus, gen, branch, cost, dyn, cont;
  if (!matpower_matrix(text, "bus", bus)) throw CaseError("missing mpc.bus");
  if (!matpower_matrix(text, "gen", gen)) throw CaseError("missing mpc.gen");
  if (!matpower_matrix(text, "branch", branch)) throw CaseError("missing mpc.branch");
  if (!matpower_matrix(text, "gencost", cost)) throw CaseError("missing mpc.gencost");
  require_columns(bus, 13, "bus");
  require_columns(gen, 10, "gen");
  require_columns(branch, 11, "branch");
  const double base = c.base_mva;
  for (const auto& r : bus) {
    Bus b;
    b.id = static_cast<int>(r[0]);
    switch (static_cast<int>(r[1])) {
      case 1: b.type = BusType::PQ; break;
      case 2: b.type = BusType::PV; break;
      case 3: b.type = BusType::Ref; break;
      default: throw CaseError(fmt::format("bus {}: unsupported type {}", b.id, r[1]));
    }
    b.pd = r[2] / base;
    b.qd = r[3] / base;
    b.gs = r[4] / base;
    b.bs = r[5] / base;
    b.vm = r[7];
    b.va = r[8] * kDeg;
    b.vmax = r[11];
    b.vmin = r[12];
    c.buses.push_back(b);
  }
  if (cost.size() != gen.size()) throw CaseError("mpc.gencost needs one row per generator");
  if (matpower_matrix(text, "gendyn", dyn)) {
    if (dyn.size() != gen.size()) throw CaseError("mpc.gendyn needs one row per generator");
    require_columns(dyn, 3, "gendyn");
  }
  for (std::size_t k = 0; k < gen.size(); ++k) {
    const auto& r = gen[k];
    Generator g;
    g.bus = static_cast<int>(r[0]);
    g.pg = r[1] / base;
    g.qg = r[2] / base;
    g.qmax = r[3] / base;
    g.qmin = r[4] / base;
    g.vg = r[5];
    g.in_service = r[7] > 0;
    g.pmax = r[8] / base;
    g.pmin = r[9] / base;
    const auto& cr = cost[k];
    if (cr.size() < 4 || static_cast<int>(cr[0]) != 2) {
      throw CaseError("only polynomial generator costs are supported");
    }
    const auto n = static_cast<std::size_t>(cr[3]);
    if (n > 3 || cr.size() < 4 + n) throw CaseError("only quadratic generator costs are supported");
    double coef[3] = {0.0, 0.0, 0.0};  // c2, c1, c0
    for (std::size_t j = 0; j < n; ++j) coef[3 - n + j] = cr[4 + j];
    g.c2 = coef[0];
    g.c1 = coef[1];
    g.c0 = coef[2];
    if (!dyn.empty()) {
      g.h = dyn[k][0];
      g.d = dyn[k][1];
      g.xdp = dyn[k][2];
    }
    c.generators.push_back(g);
  }
  for (const auto& r : branch) {
    Branch br;
    br.from = static_cast<int>(r[0]);
    br.to = static_cast<int>(r[1]);
    br.r = r[2];
    br.x = r[3];
    br.b = r[4];
    br.rate = r[5] / base;
    br.ratio = r[8] == 0.0 ? 1.0 : r[8];
    br.shift = r[9] * kDeg;
    br.in_service = r[10] > 0;
    c.branches.push_back(br);
  }
  if (matpower_matrix(text, "contingency", cont)) {
    require_columns(cont, 2, "contingency");
    for (const auto& r : cont) {
      Contingency con;
      if (r[0] > 0) con.generators.push_back(static_cast<std::size_t>(r[0]) - 1);
      if (r[1] > 0) con.branches.push_back(static_cast<std::size_t>(r[1]) - 1);
      con.label = default_label(con);
      c.contingencies.push_back(con);
    }
  }
  c.validate();
  return c;
}

std::string write_case_json(const GridCase& c) {
  using nlohmann::json;
  json doc;
  doc["version"] = 1;
  doc["name"] = c.name;
  doc["base_mva"] = c.base_mva;
  doc["frequency_hz"] = c.frequency;
  doc["buses"] = json::array();
  for (const auto& b : c.buses) {
    const char* type = b.type == BusType::Ref ? "ref" : b.type == BusType::PV ? "pv" : "pq";
    doc["buses"].push_back({{"id", b.id}, {"type", type}, {"pd", b.pd}, {"qd", b.qd},
                            {"gs", b.gs}, {"bs", b.bs}, {"vmin", b.vmin}, {"vmax", b.vmax},
                            {"vm", b.vm}, {"va_deg", b.va / kDeg}});
  }
  doc["generators"] = json::array();
  for (const auto& g : c.generators) {
    doc["generators"].push_back({{"bus", g.bus}, {"pg", g.pg}, {"qg", g.qg}, {"pmin", g.pmin},
                                 {"pmax", g.pmax}, {"qmin", g.qmin}, {"qmax", g.qmax},
                                 {"vg", g.vg}, {"cost", {g.c2, g.c1, g.c0}}, {"h", g.h},
                                 {"d", g.d}, {"xdp", g.xdp}, {"in_service", g.in_service}});
  }
  doc["branches"] = json::array();
  for (const auto& br : c.branches) {
    doc["branches"].push_back({{"from", br.from}, {"to", br.to}, {"r", br.r}, {"x", br.x},
                               {"b", br.b}, {"rate", br.rate}, {"ratio", br.ratio},
                               {"shift_deg", br.shift / kDeg}, {"in_service", br.in_service}});
  }
  doc["contingencies"] = json::array();
  for (const auto& k : c.contingencies) {
    std::vector<std::size_t> g, b;
    for (auto i : k.generators) g.push_back(i + 1);
    for (auto i : k.branches) b.push_back(i + 1);
    doc["contingencies"].push_back({{"label", k.label}, {"generators", g}, {"branches", b}});
  }
  return doc.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Network equations

BranchAdmittance branch_admittance(const Branch& br) {
  using cd = std::complex<double>;
  const cd ys = 1.0 / cd(br.r, br.x);
  const cd tap = std::polar(br.ratio, br.shift);
  const cd ych(0.0, br.b / 2.0);
  BranchAdmittance a;
  a.yff = (ys + ych) / (br.ratio * br.ratio);
  a.yft = -ys / std::conj(tap);
  a.ytf = -ys / tap;
  a.ytt = ys + ych;
  return a;
}

ComplexMatrix build_ybus(const GridCase& c) {
  const auto n = static_cast<Eigen::Index>(c.buses.size());
  ComplexMatrix y = ComplexMatrix::Zero(n, n);
  for (const auto& br : c.branches) {
    if (!br.in_service) continue;
    const auto f = static_cast<Eigen::Index>(c.bus_index(br.from));
    const auto t = static_cast<Eigen::Index>(c.bus_index(br.to));
    const auto a = branch_admittance(br);
    y(f, f) += a.yff;
    y(f, t) += a.yft;
    y(t, f) += a.ytf;
    y(t, t) += a.ytt;
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& b = c.buses[static_cast<std::size_t>(i)];
    y(i, i) += std::complex<double>(b.gs, b.bs);
  }
  return y;
}

namespace {

ComplexVector bus_voltages(std::span<const double> vm, std::span<const double> va) {
  ComplexVector v(static_cast<Eigen::Index>(vm.size()));
  for (std::size_t i = 0; i < vm.size(); ++i) v[static_cast<Eigen::Index>(i)] = std::polar(vm[i], va[i]);
  return v;
}

ComplexVector injections(const ComplexMatrix& y, const ComplexVector& v) {
  return v.cwiseProduct((y * v).conjugate());
}

}  // namespace

ComplexVector power_mismatch(const GridCase& c, std::span<const double> vm,
                             std::span<const double> va, std::span<const double> pg,
                             std::span<const double> qg) {
  const auto n = c.buses.size();
  if (vm.size() != n || va.size() != n) throw std::invalid_argument("voltage vectors must match bus count");
  if (pg.size() != c.generators.size() || qg.size() != c.generators.size()) {
    throw std::invalid_argument("dispatch vectors must match generator count");
  }
  ComplexVector mis = -injections(build_ybus(c), bus_voltages(vm, va));
  for (std::size_t i = 0; i < n; ++i) {
    mis[static_cast<Eigen::Index>(i)] -= std::complex<double>(c.buses[i].pd, c.buses[i].qd);
  }
  for (std::size_t g = 0; g < c.generators.size(); ++g) {
    if (!c.generators[g].in_service) continue;
    mis[static_cast<Eigen::Index>(c.bus_index(c.generators[g].bus))] += std::complex<double>(pg[g], qg[g]);
  }
  return mis;
}

PowerFlowResult solve_power_flow(const GridCase& c, std::span<const double> pg, double tol,
                                 std::size_t max_iter) {
  const auto n = c.buses.size();
  const auto ref = c.ref_bus();
  if (pg.size() != c.generators.size()) throw std::invalid_argument("dispatch must match generator count");

  std::vector<char> gen_bus(n, 0);
  std::vector<double> vset(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) vset[i] = c.buses[i].vm;
  for (const auto& g : c.generators) {
    if (!g.in_service) continue;
    const auto b = c.bus_index(g.bus);
    if (!gen_bus[b]) vset[b] = g.vg;
    gen_bus[b] = 1;
  }
  std::vector<Eigen::Index> ang, mag;  // unknown positions
  for (std::size_t i = 0; i < n; ++i) {
    if (i != ref) ang.push_back(static_cast<Eigen::Index>(i));
    if (!gen_bus[i]) mag.push_back(static_cast<Eigen::Index>(i));
  }
  ComplexVector spec = ComplexVector::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) spec[static_cast<Eigen::Index>(i)] = -std::complex<double>(c.buses[i].pd, c.buses[i].qd);
  for (std::size_t g = 0; g < c.generators.size(); ++g) {
    if (!c.generators[g].in_service) continue;
    spec[static_cast<Eigen::Index>(c.bus_index(c.generators[g].bus))] += pg[g];
  }

  PowerFlowResult r;
  r.vm = vset;
  r.va.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) r.va[i] = i == ref ? c.buses[i].va : 0.0;
  const ComplexMatrix y = build_ybus(c);
  const auto na = static_cast<Eigen::Index>(ang.size());
  const auto nm = static_cast<Eigen::Index>(mag.size());
  Eigen::VectorXd f(na + nm);
  for (r.iterations = 0;; ++r.iterations) {
    const ComplexVector v = bus_voltages(r.vm, r.va);
    const ComplexVector s = injections(y, v);
    const ComplexVector mis = s - spec;
    for (Eigen::Index k = 0; k < na; ++k) f[k] = mis[ang[static_cast<std::size_t>(k)]].real();
    for (Eigen::Index k = 0; k < nm; ++k) f[na + k] = mis[mag[static_cast<std::size_t>(k)]].imag();
    r.mismatch = f.size() ? f.cwiseAbs().maxCoeff() : 0.0;
    if (!std::isfinite(r.mismatch)) break;
    if (r.mismatch <= tol) {
      r.converged = true;
      break;
    }
    if (r.iterations >= max_iter) break;
    // dS/dVa and dS/dVm in polar form.
    const ComplexVector ibus = y * v;
    ComplexVector vnorm(v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) vnorm[i] = v[i] / std::abs(v[i]);
    const ComplexMatrix dva = std::complex<double>(0, 1) * v.asDiagonal() *
                              (ComplexMatrix(ibus.asDiagonal()) - y * v.asDiagonal()).conjugate();
    const ComplexMatrix dvm = v.asDiagonal() * (y * vnorm.asDiagonal()).conjugate() +
                              ComplexMatrix(ibus.conjugate().asDiagonal()) * vnorm.asDiagonal();
    Eigen::MatrixXd jac(na + nm, na + nm);
    for (Eigen::Index a = 0; a < na; ++a) {
      for (Eigen::Index b = 0; b < na; ++b) jac(a, b) = dva(ang[a], ang[b]).real();
      for (Eigen::Index b = 0; b < nm; ++b) jac(a, na + b) = dvm(ang[a], mag[b]).real();
    }
    for (Eigen::Index a = 0; a < nm; ++a) {
      for (Eigen::Index b = 0; b < na; ++b) jac(na + a, b) = dva(mag[a], ang[b]).imag();
      for (Eigen::Index b = 0; b < nm; ++b) jac(na + a, na + b) = dvm(mag[a], mag[b]).imag();
    }
    const Eigen::VectorXd dx = jac.partialPivLu().solve(-f);
    for (Eigen::Index k = 0; k < na; ++k) r.va[static_cast<std::size_t>(ang[k])] += dx[k];
    for (Eigen::Index k = 0; k < nm; ++k) r.vm[static_cast<std::size_t>(mag[k])] += dx[na + k];
  }

  // Generator outputs: the reference bus balances P, generator buses balance Q.
  const ComplexVector s = injections(y, bus_voltages(r.vm, r.va));
  r.pg.assign(pg.begin(), pg.end());
  r.qg.assign(c.generators.size(), 0.0);
  std::vector<std::size_t> count(n, 0);
  for (const auto& g : c.generators) {
    if (g.in_service) ++count[c.bus_index(g.bus)];
  }
  bool ref_assigned = false;
  for (std::size_t g = 0; g < c.generators.size(); ++g) {
    const auto& gen = c.generators[g];
    if (!gen.in_service) {
      r.pg[g] = 0.0;
      continue;
    }
    const auto b = c.bus_index(gen.bus);
    const auto bi = static_cast<Eigen::Index>(b);
    r.qg[g] = (s[bi].imag() + c.buses[b].qd) / static_cast<double>(count[b]);
    if (b == ref && !ref_assigned) {
      double others = 0.0;
      for (std::size_t h = 0; h < c.generators.size(); ++h) {
        if (h != g && c.generators[h].in_service && c.bus_index(c.generators[h].bus) == ref) others += pg[h];
      }
      r.pg[g] = s[bi].real() + c.buses[b].pd - others;
      ref_assigned = true;
    }
  }
  return r;
}

PowerFlowResult solve_power_flow(const GridCase& c) {
  std::vector<double> pg(c.generators.size());
  for (std::size_t g = 0; g < pg.size(); ++g) pg[g] = c.generators[g].pg;
  return solve_power_flow(c, pg);
}

double generation_cost(const GridCase& c, std::span<const double> pg) {
  double cost = 0.0;
  for (std::size_t g = 0; g < c.generators.size(); ++g) {
    const auto& gen = c.generators[g];
    if (!gen.in_service) continue;
    const double p = c.base_mva * pg[g];
    cost += gen.c2 * p * p + gen.c1 * p + gen.c0;
  }
  return cost;
}

// ---------------------------------------------------------------------------
// SCOPF

namespace {

struct BusExprs {
  std::vector<Expr> p, q;
};

// Polar injections P_i, Q_i from the nonzero pattern of Ybus.
BusExprs injection_exprs(NlpModel& m, const ComplexMatrix& y, const std::vector<std::size_t>& vm,
                         const std::vector<std::size_t>& va) {
  const auto n = vm.size();
  BusExprs out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    Expr vi = m.var(vm[i]);
    Expr sp = square(vi) * y(ii, ii).real();
    Expr sq = square(vi) * -y(ii, ii).imag();
    for (std::size_t j = 0; j < n; ++j) {
      const auto jj = static_cast<Eigen::Index>(j);
      if (j == i || y(ii, jj) == std::complex<double>(0.0)) continue;
      const double g = y(ii, jj).real(), b = y(ii, jj).imag();
      Expr vv = vi * m.var(vm[j]);
      Expr th = m.var(va[i]) - m.var(va[j]);
      Expr c = cos(th), s = sin(th);
      sp = sp + vv * (g * c + b * s);
      sq = sq + vv * (g * s - b * c);
    }
    out.p.push_back(sp);
    out.q.push_back(sq);
  }
  return out;
}

// |I|^2 for I = ya Va + yb Vb in rectangular parts.
Expr current_squared(NlpModel& m, std::complex<double> ya, std::complex<double> yb, std::size_t vma,
                     std::size_t vaa, std::size_t vmb, std::size_t vab) {
  Expr ra = m.var(vma) * cos(m.var(vaa)), ia = m.var(vma) * sin(m.var(vaa));
  Expr rb = m.var(vmb) * cos(m.var(vab)), ib = m.var(vmb) * sin(m.var(vab));
  Expr re = ya.real() * ra - ya.imag() * ia + yb.real() * rb - yb.imag() * ib;
  Expr im = ya.real() * ia + ya.imag() * ra + yb.real() * ib + yb.imag() * rb;
  return square(re) + square(im);
}

void add_scenario(ScopfModel& s, const Contingency* con) {
  NlpModel& m = s.model;
  const GridCase grid = con ? s.grid.with_outage(*con) : s.grid;
  const auto n = grid.buses.size();
  const auto ref = grid.ref_bus();
  Scenario sc;
  if (con) sc.contingency = *con;
  const std::string tag = con ? fmt::format("c{}", s.scenarios.size()) : "base";

  PowerFlowResult pf = solve_power_flow(grid);
  if (!pf.converged) pf = solve_power_flow(s.grid);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& b = grid.buses[i];
    const double v0 = pf.converged ? pf.vm[i] : 1.0;
    sc.vm.push_back(m.add_variable(b.vmin, b.vmax, v0, fmt::format("{}_vm{}", tag, b.id)));
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto& b = grid.buses[i];
    if (i == ref) {
      sc.va.push_back(m.add_variable(b.va, b.va, b.va, fmt::format("{}_va{}", tag, b.id)));
    } else {
      sc.va.push_back(m.add_variable(-kInf, kInf, pf.converged ? pf.va[i] : 0.0,
                                     fmt::format("{}_va{}", tag, b.id)));
    }
  }

  sc.rows.first = m.num_rows();
  const ComplexMatrix y = build_ybus(grid);
  const BusExprs inj = injection_exprs(m, y, sc.vm, sc.va);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& b = grid.buses[i];
    Expr pbody = -inj.p[i];
    Expr qbody = -inj.q[i];
    double p_lo = b.pd, p_hi = b.pd, q_lo = b.qd, q_hi = b.qd;
    for (std::size_t g = 0; g < grid.generators.size(); ++g) {
      const auto& gen = grid.generators[g];
      if (!gen.in_service || grid.bus_index(gen.bus) != i) continue;
      if (!con) {
        pbody = pbody + m.var(s.pg[g]);
        qbody = qbody + m.var(s.qg[g]);
        continue;
      }
      // Post-contingency: the reference machine picks up the real-power
      // imbalance and every machine regulates reactive power within limits.
      if (i == ref) {
        p_lo -= gen.pmax;
        p_hi -= gen.pmin;
      } else {
        pbody = pbody + m.var(s.pg[g]);
      }
      q_lo -= gen.qmax;
      q_hi -= gen.qmin;
    }
    m.add_constraint(pbody, p_lo, p_hi, "p-balance");
    m.add_constraint(qbody, q_lo, q_hi, "q-balance");
  }
  for (const auto& br : grid.branches) {
    if (!br.in_service || br.rate <= 0.0) continue;
    const auto f = grid.bus_index(br.from), t = grid.bus_index(br.to);
    const auto a = branch_admittance(br);
    const double lim = br.rate * br.rate;
    m.add_constraint(current_squared(m, a.yff, a.yft, sc.vm[f], sc.va[f], sc.vm[t], sc.va[t]),
                     -kInf, lim, "thermal");
    m.add_constraint(current_squared(m, a.ytt, a.ytf, sc.vm[t], sc.va[t], sc.vm[f], sc.va[f]),
                     -kInf, lim, "thermal");
  }
  sc.rows.count = m.num_rows() - sc.rows.first;
  s.scenarios.push_back(std::move(sc));
}

}  // namespace

ScopfModel build_scopf(const GridCase& c, const std::vector<Contingency>& contingencies) {
  c.validate();
  for (const auto& k : contingencies) c.with_outage(k);
  ScopfModel s;
  s.grid = c;
  NlpModel& m = s.model;

  const PowerFlowResult pf = solve_power_flow(c);
  for (std::size_t g = 0; g < c.generators.size(); ++g) {
    const auto& gen = c.generators[g];
    const double p0 = pf.converged ? pf.pg[g] : gen.pg;
    if (gen.in_service) {
      s.pg.push_back(m.add_variable(gen.pmin, gen.pmax, p0, fmt::format("pg{}", g + 1)));
    } else {
      s.pg.push_back(m.add_variable(0.0, 0.0, 0.0, fmt::format("pg{}", g + 1)));
    }
  }
  for (std::size_t g = 0; g < c.generators.size(); ++g) {
    const auto& gen = c.generators[g];
    const double q0 = pf.converged ? pf.qg[g] : gen.qg;
    if (gen.in_service) {
      s.qg.push_back(m.add_variable(gen.qmin, gen.qmax, q0, fmt::format("qg{}", g + 1)));
    } else {
      s.qg.push_back(m.add_variable(0.0, 0.0, 0.0, fmt::format("qg{}", g + 1)));
    }
  }

  Expr cost = m.var(s.pg[0]) * 0.0;
  for (std::size_t g = 0; g < c.generators.size(); ++g) {
    const auto& gen = c.generators[g];
    if (!gen.in_service) continue;
    Expr p = m.var(s.pg[g]) * c.base_mva;
    cost = cost + gen.c2 * square(p) + gen.c1 * p + gen.c0;
  }
  m.set_objective(cost);

  add_scenario(s, nullptr);
  for (const auto& k : contingencies) add_scenario(s, &k);
  return s;
}

std::size_t stability_feature_dim(const GridCase& c) {
  return 2 * c.buses.size() + c.generators.size();
}

std::vector<std::string> stability_feature_names(const GridCase& c) {
  std::vector<std::string> names;
  for (const auto& b : c.buses) names.push_back(fmt::format("pd{}", b.id));
  for (const auto& b : c.buses) names.push_back(fmt::format("qd{}", b.id));
  for (std::size_t g = 0; g < c.generators.size(); ++g) names.push_back(fmt::format("pg{}", g + 1));
  return names;
}

std::vector<double> stability_features(const GridCase& c, std::span<const double> pg) {
  if (pg.size() != c.generators.size()) throw std::invalid_argument("dispatch must match generator count");
  std::vector<double> f;
  for (const auto& b : c.buses) f.push_back(b.pd);
  for (const auto& b : c.buses) f.push_back(b.qd);
  f.insert(f.end(), pg.begin(), pg.end());
  return f;
}

void attach_stability(ScopfModel& s, const MlpNetwork& net, Formulation f, double eta,
                      bool with_hessian) {
  const auto nb = s.grid.buses.size();
  if (net.input_dim() != stability_feature_dim(s.grid)) {
    throw std::invalid_argument(fmt::format("stability network takes {} inputs, case has {} features",
                                            net.input_dim(), stability_feature_dim(s.grid)));
  }
  if (net.output_dim() != nb) {
    throw std::invalid_argument(fmt::format("stability network has {} outputs, case has {} buses",
                                            net.output_dim(), nb));
  }
  std::vector<std::size_t> fixed(2 * nb);
  std::iota(fixed.begin(), fixed.end(), 0);
  const auto feats = stability_features(s.grid, std::vector<double>(s.grid.generators.size(), 0.0));
  const MlpNetwork live = net.partially_apply(fixed, std::span(feats).first(2 * nb));
  for (std::size_t k = 1; k < s.scenarios.size(); ++k) {
    const std::string tag = fmt::format("stab{}", k);
    auto h = embed(s.model, live, s.pg, f, tag, with_hessian);
    RowRange rows{s.model.num_rows(), 0};
    if (std::isfinite(eta)) {
      for (std::size_t i = 0; i < h.output_dim(); ++i) h.constrain_output(s.model, i, eta, kInf, "stability");
    }
    rows.count = s.model.num_rows() - rows.first;
    s.stability.push_back(std::move(h));
    s.stability_rows.push_back(rows);
  }
}

ScopfSolution extract_solution(const ScopfModel& s, std::span<const double> x) {
  ScopfSolution sol;
  for (auto v : s.pg) sol.pg.push_back(x[v]);
  for (auto v : s.qg) sol.qg.push_back(x[v]);
  for (const auto& sc : s.scenarios) {
    std::vector<double> vm, va;
    for (auto v : sc.vm) vm.push_back(x[v]);
    for (auto v : sc.va) va.push_back(x[v]);
    sol.vm.push_back(std::move(vm));
    sol.va.push_back(std::move(va));
  }
  sol.cost = generation_cost(s.grid, sol.pg);
  return sol;
}

ScopfResult solve_scopf(ScopfModel& s, const IpmOptions& options) {
  if (!s.model.sealed()) s.model.seal();
  const CanonicalModel c = canonicalize(s.model);
  ScopfResult r;
  r.ipm = solve_nlp(c.model, options);
  r.x = c.recover_variables(r.ipm.x);
  r.solution = extract_solution(s, r.x);
  return r;
}

double max_power_mismatch(const ScopfModel& s, const ScopfSolution& sol) {
  double worst = 0.0;
  for (std::size_t k = 0; k < s.scenarios.size(); ++k) {
    const auto& sc = s.scenarios[k];
    if (k == 0) {
      const auto mis = power_mismatch(s.grid, sol.vm[0], sol.va[0], sol.pg, sol.qg);
      worst = std::max(worst, mis.cwiseAbs().maxCoeff());
      continue;
    }
    // Post-contingency: fixed injections are known; the free parts must lie
    // within the machines' limits.
    const GridCase grid = s.grid.with_outage(sc.contingency);
    const auto ref = grid.ref_bus();
    const std::vector<double> zero(grid.generators.size(), 0.0);
    const auto net = power_mismatch(grid, sol.vm[k], sol.va[k], zero, zero);
    for (std::size_t i = 0; i < grid.buses.size(); ++i) {
      double p = -net[static_cast<Eigen::Index>(i)].real();  // required generation
      double q = -net[static_cast<Eigen::Index>(i)].imag();
      double plo = 0.0, phi = 0.0, qlo = 0.0, qhi = 0.0;
      for (std::size_t g = 0; g < grid.generators.size(); ++g) {
        const auto& gen = grid.generators[g];
        if (!gen.in_service || grid.bus_index(gen.bus) != i) continue;
        if (i == ref) {
          plo += gen.pmin;
          phi += gen.pmax;
        } else {
          p -= sol.pg[g];
        }
        qlo += gen.qmin;
        qhi += gen.qmax;
      }
      const double dp = std::max({0.0, plo - p, p - phi});
      const double dq = std::max({0.0, qlo - q, q - qhi});
      worst = std::max(worst, std::hypot(dp, dq));
    }
  }
  return worst;
}

}  // namespace mlopt
