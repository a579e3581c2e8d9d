#include "mlopt/transim.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "mlopt/table.hpp"

namespace mlopt {

void TransientConfig::validate() const {
  if (!(step > 0.0) || !std::isfinite(step)) throw std::invalid_argument("integration step must be positive");
  if (!(horizon > 0.0) || !std::isfinite(horizon)) throw std::invalid_argument("horizon must be positive");
  if (!(disturbance_time >= 0.0) || disturbance_time > horizon) {
    throw std::invalid_argument("disturbance time must lie in [0, horizon]");
  }
  if (!(nominal_frequency > 0.0)) throw std::invalid_argument("nominal frequency must be positive");
}

Eigen::VectorXd ClassicalModel::electrical_power(const Eigen::VectorXd& delta) const {
  const auto n = delta.size();
  Eigen::VectorXd pe(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double p = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double d = delta[i] - delta[j];
      p += emf[j] * (yred(i, j).real() * std::cos(d) + yred(i, j).imag() * std::sin(d));
    }
    pe[i] = emf[i] * p;
  }
  return pe;
}

namespace {

// Kron reduction onto the internal nodes of `m.machines`; fills yred and bus_weights.
void reduce(const GridCase& c, ClassicalModel& m) {
  const auto nb = static_cast<Eigen::Index>(c.buses.size());
  const auto ng = static_cast<Eigen::Index>(m.machines.size());
  ComplexMatrix ybb = build_ybus(c);
  ybb.diagonal() += m.load_admittance;
  ComplexMatrix ybg = ComplexMatrix::Zero(nb, ng);
  ComplexVector yint(ng);
  for (Eigen::Index i = 0; i < ng; ++i) {
    const auto& gen = c.generators[m.machines[static_cast<std::size_t>(i)]];
    const auto b = static_cast<Eigen::Index>(c.bus_index(gen.bus));
    yint[i] = 1.0 / std::complex<double>(0.0, gen.xdp);
    ybb(b, b) += yint[i];
    ybg(b, i) = -yint[i];
  }
  const ComplexMatrix k = -ybb.partialPivLu().solve(ybg);  // bus voltages per unit EMF
  m.yred = ComplexMatrix(yint.asDiagonal()) + ybg.transpose() * k;
  m.bus_weights = k.cwiseAbs();
  for (Eigen::Index b = 0; b < nb; ++b) {
    const double s = m.bus_weights.row(b).sum();
    if (s > 0.0) m.bus_weights.row(b) /= s;
  }
}

struct Derivative {
  Eigen::VectorXd ddelta, dspeed;
};

Derivative rhs(const ClassicalModel& m, double omega0, const Eigen::VectorXd& delta,
               const Eigen::VectorXd& speed) {
  Derivative d;
  d.ddelta = omega0 * speed;
  const Eigen::VectorXd pe = m.electrical_power(delta);
  d.dspeed = (m.pm - pe - m.damping.cwiseProduct(speed)).cwiseQuotient(m.inertia);
  return d;
}

}  // namespace

InitialState build_classical_model(const GridCase& c, const PowerFlowResult& op) {
  const auto nb = c.buses.size();
  if (op.vm.size() != nb || op.va.size() != nb || op.pg.size() != c.generators.size() ||
      op.qg.size() != c.generators.size()) {
    throw TransientError("operating point does not match the case dimensions");
  }
  InitialState st;
  auto& m = st.model;
  m.load_admittance = ComplexVector(static_cast<Eigen::Index>(nb));
  for (std::size_t b = 0; b < nb; ++b) {
    const double v2 = op.vm[b] * op.vm[b];
    m.load_admittance[static_cast<Eigen::Index>(b)] = std::complex<double>(c.buses[b].pd, -c.buses[b].qd) / v2;
  }
  for (std::size_t g = 0; g < c.generators.size(); ++g) {
    if (c.generators[g].in_service) m.machines.push_back(g);
  }
  const auto ng = static_cast<Eigen::Index>(m.machines.size());
  m.emf.resize(ng);
  m.inertia.resize(ng);
  m.damping.resize(ng);
  st.delta.resize(ng);
  for (Eigen::Index i = 0; i < ng; ++i) {
    const auto g = m.machines[static_cast<std::size_t>(i)];
    const auto& gen = c.generators[g];
    if (!(gen.xdp > 0.0)) throw TransientError(fmt::format("generator {} needs a positive transient reactance", g + 1));
    if (!(gen.h > 0.0)) throw TransientError(fmt::format("generator {} needs a positive inertia constant", g + 1));
    const auto b = c.bus_index(gen.bus);
    const std::complex<double> v = std::polar(op.vm[b], op.va[b]);
    const std::complex<double> cur = std::conj(std::complex<double>(op.pg[g], op.qg[g]) / v);
    const std::complex<double> e = v + std::complex<double>(0.0, gen.xdp) * cur;
    m.emf[i] = std::abs(e);
    st.delta[i] = std::arg(e);
    m.inertia[i] = 2.0 * gen.h;
    m.damping[i] = gen.d;
  }
  reduce(c, m);
  m.pm = m.electrical_power(st.delta);
  return st;
}

ClassicalModel remove_machine(const GridCase& c, const ClassicalModel& m, std::size_t generator) {
  const auto it = std::find(m.machines.begin(), m.machines.end(), generator);
  if (it == m.machines.end()) throw TransientError(fmt::format("generator {} is not an active machine", generator + 1));
  const auto k = static_cast<Eigen::Index>(it - m.machines.begin());
  const auto n = static_cast<Eigen::Index>(m.machines.size());
  auto drop = [&](const Eigen::VectorXd& v) {
    Eigen::VectorXd out(n - 1);
    out << v.head(k), v.tail(n - k - 1);
    return out;
  };
  ClassicalModel r;
  r.machines = m.machines;
  r.machines.erase(r.machines.begin() + k);
  r.emf = drop(m.emf);
  r.inertia = drop(m.inertia);
  r.damping = drop(m.damping);
  r.pm = drop(m.pm);
  r.load_admittance = m.load_admittance;
  reduce(c, r);
  return r;
}

TransientResult simulate(const GridCase& c, const PowerFlowResult& op, const TransientConfig& cfg) {
  cfg.validate();
  {
    const auto mis = power_mismatch(c, op.vm, op.va, op.pg, op.qg);
    const double worst = mis.size() ? mis.cwiseAbs().maxCoeff() : 0.0;
    if (!(worst <= 1e-6)) {
      throw TransientError(fmt::format("operating point violates the power flow (mismatch {:.3e} pu)", worst));
    }
  }
  if (cfg.outage && (*cfg.outage >= c.generators.size() || !c.generators[*cfg.outage].in_service)) {
    throw TransientError("outaged generator must be an in-service generator");
  }
  if (!cfg.initial_speed.empty() && cfg.initial_speed.size() != c.generators.size()) {
    throw std::invalid_argument("initial speed must have one entry per generator");
  }

  const double omega0 = 2.0 * std::numbers::pi * cfg.nominal_frequency;
  auto init = build_classical_model(c, op);
  ClassicalModel model = std::move(init.model);
  Eigen::VectorXd delta = init.delta;
  Eigen::VectorXd speed = Eigen::VectorXd::Zero(delta.size());
  if (!cfg.initial_speed.empty()) {
    for (std::size_t i = 0; i < model.machines.size(); ++i) {
      speed[static_cast<Eigen::Index>(i)] = cfg.initial_speed[model.machines[i]];
    }
  }

  const auto ngen = c.generators.size();
  const auto nb = c.buses.size();
  TransientResult r;
  r.delta.assign(ngen, {});
  r.speed.assign(ngen, {});
  r.bus_frequency.assign(nb, {});
  r.bus_frequency_rate.assign(nb, {});
  std::vector<double> held_delta(ngen, 0.0), held_speed(ngen, 0.0);

  auto record = [&](double t) {
    r.time.push_back(t);
    for (std::size_t i = 0; i < model.machines.size(); ++i) {
      held_delta[model.machines[i]] = delta[static_cast<Eigen::Index>(i)];
      held_speed[model.machines[i]] = speed[static_cast<Eigen::Index>(i)];
    }
    for (std::size_t g = 0; g < ngen; ++g) {
      r.delta[g].push_back(held_delta[g]);
      r.speed[g].push_back(held_speed[g]);
    }
    const Eigen::VectorXd dspeed = rhs(model, omega0, delta, speed).dspeed;
    const Eigen::VectorXd f = model.bus_weights * speed;
    const Eigen::VectorXd df = model.bus_weights * dspeed;
    for (std::size_t b = 0; b < nb; ++b) {
      const auto bi = static_cast<Eigen::Index>(b);
      r.bus_frequency[b].push_back(cfg.nominal_frequency * (1.0 + f[bi]));
      r.bus_frequency_rate[b].push_back(cfg.nominal_frequency * df[bi]);
    }
  };

  auto switch_model = [&]() {
    const auto k = static_cast<Eigen::Index>(
        std::find(model.machines.begin(), model.machines.end(), *cfg.outage) - model.machines.begin());
    const auto n = delta.size();
    Eigen::VectorXd d(n - 1), w(n - 1);
    d << delta.head(k), delta.tail(n - k - 1);
    w << speed.head(k), speed.tail(n - k - 1);
    model = remove_machine(c, model, *cfg.outage);
    delta = std::move(d);
    speed = std::move(w);
  };

  // Integrates [t0, t1] with equal steps no longer than cfg.step.
  auto integrate = [&](double t0, double t1) {
    if (!(t1 > t0)) return true;
    const auto steps = static_cast<std::size_t>(std::ceil((t1 - t0) / cfg.step - 1e-9));
    const double h = (t1 - t0) / static_cast<double>(steps);
    for (std::size_t s = 1; s <= steps; ++s) {
      const auto k1 = rhs(model, omega0, delta, speed);
      const auto k2 = rhs(model, omega0, delta + 0.5 * h * k1.ddelta, speed + 0.5 * h * k1.dspeed);
      const auto k3 = rhs(model, omega0, delta + 0.5 * h * k2.ddelta, speed + 0.5 * h * k2.dspeed);
      const auto k4 = rhs(model, omega0, delta + h * k3.ddelta, speed + h * k3.dspeed);
      delta += h / 6.0 * (k1.ddelta + 2.0 * k2.ddelta + 2.0 * k3.ddelta + k4.ddelta);
      speed += h / 6.0 * (k1.dspeed + 2.0 * k2.dspeed + 2.0 * k3.dspeed + k4.dspeed);
      if (!delta.allFinite() || !speed.allFinite()) return false;
      record(s == steps ? t1 : t0 + static_cast<double>(s) * h);
    }
    return true;
  };

  const bool outage_now = cfg.outage && cfg.disturbance_time == 0.0;
  if (outage_now) switch_model();
  record(0.0);
  bool ok = true;
  if (cfg.outage && !outage_now) {
    ok = integrate(0.0, cfg.disturbance_time);
    if (ok) {
      switch_model();
      r.window_start = r.time.size();
      record(cfg.disturbance_time);
      ok = integrate(cfg.disturbance_time, cfg.horizon);
    }
  } else {
    ok = integrate(0.0, cfg.horizon);
  }
  if (!ok) {
    r.blown_up = true;
    return r;
  }
  r.min_frequency = min_frequency(r);
  return r;
}

std::vector<double> min_frequency(const TransientResult& r) {
  if (r.blown_up) throw TransientError("simulation blew up; no minimum frequency");
  const bool hermite = !r.bus_frequency_rate.empty();
  std::vector<double> out;
  for (std::size_t b = 0; b < r.bus_frequency.size(); ++b) {
    const auto& f = r.bus_frequency[b];
    if (r.window_start >= f.size()) throw TransientError("empty post-disturbance window");
    double lo = std::numeric_limits<double>::infinity();
    for (std::size_t k = r.window_start; k < f.size(); ++k) {
      if (!std::isfinite(f[k])) throw TransientError("non-finite frequency trace");
      lo = std::min(lo, f[k]);
    }
    if (hermite) {
      const auto& m = r.bus_frequency_rate[b];
      for (std::size_t k = r.window_start; k + 1 < f.size(); ++k) {
        const double dt = r.time[k + 1] - r.time[k];
        if (!(dt > 0.0) || !(m[k] < 0.0 && m[k + 1] > 0.0)) continue;
        // Stationary points of the cubic Hermite interpolant on [0, 1].
        const double a = 6.0 * f[k] + 3.0 * dt * m[k] - 6.0 * f[k + 1] + 3.0 * dt * m[k + 1];
        const double bq = -6.0 * f[k] - 4.0 * dt * m[k] + 6.0 * f[k + 1] - 2.0 * dt * m[k + 1];
        const double cq = dt * m[k];
        std::vector<double> roots;
        if (std::abs(a) < 1e-300) {
          if (bq != 0.0) roots.push_back(-cq / bq);
        } else {
          const double disc = bq * bq - 4.0 * a * cq;
          if (disc >= 0.0) {
            const double sq = std::sqrt(disc);
            const double q = -0.5 * (bq + std::copysign(sq, bq));
            roots.push_back(q / a);
            if (q != 0.0) roots.push_back(cq / q);
          }
        }
        for (double s : roots) {
          if (!(s > 0.0 && s < 1.0)) continue;
          const double s2 = s * s, s3 = s2 * s;
          const double v = (2 * s3 - 3 * s2 + 1) * f[k] + (s3 - 2 * s2 + s) * dt * m[k] +
                           (-2 * s3 + 3 * s2) * f[k + 1] + (s3 - s2) * dt * m[k + 1];
          lo = std::min(lo, v);
        }
      }
    }
    out.push_back(lo);
  }
  return out;
}

std::vector<std::string> min_frequency_names(const GridCase& c) {
  std::vector<std::string> names;
  for (const auto& b : c.buses) names.push_back(fmt::format("fmin{}", b.id));
  return names;
}

SampleReport sample_dataset(const GridCase& c, const TransientConfig& cfg, std::size_t n,
                            std::uint64_t seed, double spread, std::size_t threads) {
  if (n == 0) throw std::invalid_argument("sample count must be at least 1");
  if (!(spread >= 0.0 && spread < 1.0)) throw std::invalid_argument("spread must lie in [0, 1)");
  cfg.validate();
  c.validate();

  struct Point {
    GridCase grid;
    PowerFlowResult pf;
  };
  SampleReport rep;
  std::vector<Point> points;
  points.reserve(n);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&](double nominal) { return nominal * (1.0 + spread * (2.0 * unit(rng) - 1.0)); };
  constexpr std::size_t kMaxDraws = 1000;
  while (points.size() < n) {
    if (rep.resampled > kMaxDraws * n) throw TransientError("too many unsolvable sampled operating points");
    GridCase g = c;
    for (auto& b : g.buses) b.pd = draw(b.pd);
    for (auto& b : g.buses) b.qd = draw(b.qd);
    std::vector<double> pg(g.generators.size());
    for (std::size_t k = 0; k < pg.size(); ++k) pg[k] = draw(g.generators[k].pg);
    auto pf = solve_power_flow(g, pg);
    if (!pf.converged) {
      ++rep.resampled;
      continue;
    }
    points.push_back({std::move(g), std::move(pf)});
  }

  const auto nf = stability_feature_dim(c);
  const auto nt = c.buses.size();
  rep.data.feature_names = stability_feature_names(c);
  rep.data.target_names = min_frequency_names(c);
  rep.data.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(nf));
  rep.data.targets.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(nt));
  std::vector<std::string> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < n; i = next++) {
      const auto& p = points[i];
      const auto feats = stability_features(p.grid, p.pf.pg);
      for (std::size_t j = 0; j < nf; ++j) rep.data.inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = feats[j];
      try {
        const auto r = simulate(p.grid, p.pf, cfg);
        if (r.blown_up) {
          errors[i] = "simulation blew up";
          continue;
        }
        for (std::size_t j = 0; j < nt; ++j) {
          rep.data.targets(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = r.min_frequency[j];
        }
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i].empty()) throw TransientError(fmt::format("sample {}: {}", i, errors[i]));
  }
  return rep;
}

std::string dataset_to_csv(const Dataset& d) {
  TableRow header = d.feature_names;
  header.insert(header.end(), d.target_names.begin(), d.target_names.end());
  std::vector<TableRow> rows;
  for (Eigen::Index i = 0; i < d.inputs.rows(); ++i) {
    TableRow row;
    for (Eigen::Index j = 0; j < d.inputs.cols(); ++j) row.push_back(fmt::format("{}", d.inputs(i, j)));
    for (Eigen::Index j = 0; j < d.targets.cols(); ++j) row.push_back(fmt::format("{}", d.targets(i, j)));
    rows.push_back(std::move(row));
  }
  return render_csv(header, rows);
}

void write_dataset_csv(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out << dataset_to_csv(d);
  if (!out) throw std::runtime_error(fmt::format("failed writing {}", path.string()));
}

Dataset read_dataset_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot read {}", path.string()));
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(fmt::format("{}: missing header", path.string()));
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const TableRow header = parse_csv_line(line);
  std::vector<bool> is_target;
  Dataset d;
  for (const auto& h : header) {
    const bool t = h.rfind("fmin", 0) == 0;
    is_target.push_back(t);
    (t ? d.target_names : d.feature_names).push_back(h);
  }
  if (d.feature_names.empty() || d.target_names.empty()) {
    throw std::runtime_error(fmt::format("{}: header needs feature and fmin columns", path.string()));
  }
  std::vector<std::vector<double>> xs, ys;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const TableRow row = parse_csv_line(line);
    if (row.size() != header.size()) {
      throw std::runtime_error(fmt::format("{}:{}: expected {} fields, got {}", path.string(), lineno,
                                           header.size(), row.size()));
    }
    std::vector<double> x, y;
    for (std::size_t j = 0; j < row.size(); ++j) {
      double v = 0.0;
      const auto* first = row[j].data();
      const auto* last = first + row[j].size();
      const auto res = std::from_chars(first, last, v);
      if (res.ec != std::errc() || res.ptr != last) {
        throw std::runtime_error(fmt::format("{}:{}: bad number '{}'", path.string(), lineno, row[j]));
      }
      (is_target[j] ? y : x).push_back(v);
    }
    xs.push_back(std::move(x));
    ys.push_back(std::move(y));
  }
  const auto n = static_cast<Eigen::Index>(xs.size());
  d.inputs.resize(n, static_cast<Eigen::Index>(d.feature_names.size()));
  d.targets.resize(n, static_cast<Eigen::Index>(d.target_names.size()));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d.inputs.cols(); ++j) d.inputs(i, j) = xs[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    for (Eigen::Index j = 0; j < d.targets.cols(); ++j) d.targets(i, j) = ys[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  return d;
}

void write_trace_csv(const GridCase& c, const TransientResult& r, const std::filesystem::path& path) {
  TableRow header{"time"};
  for (std::size_t g = 0; g < r.speed.size(); ++g) header.push_back(fmt::format("speed{}", g + 1));
  for (const auto& b : c.buses) header.push_back(fmt::format("freq{}", b.id));
  std::vector<TableRow> rows;
  for (std::size_t k = 0; k < r.time.size(); ++k) {
    TableRow row{fmt::format("{}", r.time[k])};
    for (const auto& s : r.speed) row.push_back(fmt::format("{}", s[k]));
    for (const auto& f : r.bus_frequency) row.push_back(fmt::format("{}", f[k]));
    rows.push_back(std::move(row));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out << render_csv(header, rows);
}

}  // namespace mlopt
