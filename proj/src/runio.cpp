#include <cmath>
#include <fstream>
#include <sstream>

#include "stackpost/errors.hpp"
#include "stackpost/localfit.hpp"

namespace stackpost {

namespace {

using nlohmann::json;

constexpr int kCorrectionSamples = 2000;

json vector_json(const Vector& v) {
  json out = json::array();
  for (double x : v) out.push_back(x);
  return out;
}

json matrix_json(const Matrix& m) {
  json out = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.push_back(vector_json(m.row(i).transpose()));
  return out;
}

const json& field(const json& j, const std::string& name, const std::string& where) {
  if (!j.is_object() || !j.contains(name)) throw ParseError("run file: missing field '" + where + name + "'");
  return j.at(name);
}

double number(const json& j, const std::string& name) {
  if (!j.is_number()) throw ParseError("run file: field '" + name + "' must be a number");
  return j.get<double>();
}

Vector read_vector(const json& j, const std::string& name, Eigen::Index expected = -1) {
  if (!j.is_array()) throw ParseError("run file: field '" + name + "' must be an array");
  if (expected >= 0 && static_cast<Eigen::Index>(j.size()) != expected) {
    throw ParseError("run file: field '" + name + "' has length " + std::to_string(j.size()) + ", expected " +
                     std::to_string(expected));
  }
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = number(j[i], name);
  return v;
}

Matrix read_matrix(const json& j, const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows) {
    throw ParseError("run file: field '" + name + "' must have " + std::to_string(rows) + " rows");
  }
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    m.row(i) = read_vector(j[static_cast<std::size_t>(i)], name, cols).transpose();
  }
  return m;
}

ParamTransform read_transform(const json& j, int d) {
  const std::string kind_name = [&] {
    const json& k = field(j, "kind", "transform.");
    if (!k.is_string()) throw ParseError("run file: field 'transform.kind' must be a string");
    return k.get<std::string>();
  }();
  const TransformKind kind = transform_kind_from_string(kind_name);
  if (kind == TransformKind::identity) return ParamTransform::identity(d);
  const json& a_json = field(j, "A", "transform.");
  const Vector flat = read_vector(a_json, "transform.A", static_cast<Eigen::Index>(d) * d);
  Matrix a(d, d);
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < d; ++c) a(r, c) = flat[r * d + c];
  const Vector b = read_vector(field(j, "b", "transform."), "transform.b", d);
  if (kind == TransformKind::affine) return ParamTransform::affine(a, b);
  const json& bounds = field(j, "bounds", "transform.");
  const Vector lo = read_vector(field(bounds, "lower", "transform.bounds."), "transform.bounds.lower", d);
  const Vector hi = read_vector(field(bounds, "upper", "transform.bounds."), "transform.bounds.upper", d);
  return ParamTransform::bounded_affine(lo, hi, a, b);
}

}  // namespace

void RunOutput::validate() const {
  const auto k = static_cast<Eigen::Index>(posterior.size());
  if (posterior.dimension() != transform.dimension()) {
    throw ValidationError("RunOutput: transform dimension differs from posterior dimension");
  }
  if (I_hat.size() != k) throw ValidationError("RunOutput: I_hat length differs from component count");
  if (L_hat && L_hat->size() != k) throw ValidationError("RunOutput: L_hat length differs from component count");
  if (J.rows() != k || J.cols() != k) throw ValidationError("RunOutput: J must be K x K");
  if (!I_hat.allFinite()) throw ValidationError("RunOutput: I_hat has non-finite entries");
  if (!J.allFinite()) throw ValidationError("RunOutput: J has non-finite entries");
  if (!std::isfinite(elbo)) throw ValidationError("RunOutput: elbo is not finite");
}

nlohmann::json run_to_json(const RunOutput& run) {
  json j;
  const int d = run.posterior.dimension();
  j["dimension"] = d;
  j["weights"] = vector_json(run.posterior.weights());
  json means = json::array();
  json covs = json::array();
  for (const auto& c : run.posterior.components()) {
    means.push_back(vector_json(c.mean()));
    covs.push_back(matrix_json(c.covariance()));
  }
  j["means"] = means;
  j["covariances"] = covs;
  json t;
  t["kind"] = to_string(run.transform.kind());
  if (run.transform.kind() != TransformKind::identity) {
    json flat = json::array();
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < d; ++c) flat.push_back(run.transform.linear()(r, c));
    t["A"] = flat;
    t["b"] = vector_json(run.transform.offset());
  }
  if (run.transform.lower()) {
    t["bounds"] = {{"lower", vector_json(*run.transform.lower())}, {"upper", vector_json(*run.transform.upper())}};
  }
  j["transform"] = t;
  if (run.L_hat) j["L_hat"] = vector_json(*run.L_hat);
  j["I_hat"] = vector_json(run.I_hat);
  j["J"] = matrix_json(run.J);
  j["elbo"] = run.elbo;
  j["converged"] = run.converged;
  return j;
}

RunOutput run_from_json(const nlohmann::json& j) {
  const json& dim_json = field(j, "dimension", "");
  if (!dim_json.is_number_integer() || dim_json.get<long>() < 1) {
    throw ParseError("run file: field 'dimension' must be a positive integer");
  }
  const int d = dim_json.get<int>();
  const Vector weights = read_vector(field(j, "weights", ""), "weights");
  const auto k = weights.size();
  if (k < 1) throw ParseError("run file: field 'weights' is empty");
  if ((weights.array() < 0.0).any()) throw ValidationError("run file: negative entry in 'weights'");
  if (std::abs(weights.sum() - 1.0) > 1e-6) {
    std::ostringstream msg;
    msg << "run file: 'weights' sum to " << weights.sum() << ", not 1";
    throw ValidationError(msg.str());
  }
  const Matrix means = read_matrix(field(j, "means", ""), "means", k, d);
  const json& covs = field(j, "covariances", "");
  if (!covs.is_array() || static_cast<Eigen::Index>(covs.size()) != k) {
    throw ParseError("run file: field 'covariances' must hold one matrix per component");
  }
  std::vector<GaussianComponent> comps;
  for (Eigen::Index i = 0; i < k; ++i) {
    const Matrix c = read_matrix(covs[static_cast<std::size_t>(i)], "covariances", d, d);
    try {
      comps.emplace_back(means.row(i).transpose(), c);
    } catch (const std::exception& e) {
      throw ValidationError("run file: covariance " + std::to_string(i) + " rejected: " + e.what());
    }
  }
  GaussianMixture posterior(std::move(comps), weights / weights.sum());
  ParamTransform transform = read_transform(field(j, "transform", ""), d);

  std::optional<Vector> l_hat;
  if (j.contains("L_hat")) l_hat = read_vector(j.at("L_hat"), "L_hat", k);
  Vector i_hat;
  if (j.contains("I_hat")) {
    i_hat = read_vector(j.at("I_hat"), "I_hat", k);
  } else if (l_hat) {
    Rng rng(0, 0x636f7272ULL);
    i_hat.resize(k);
    for (Eigen::Index c = 0; c < k; ++c) {
      const auto& comp = posterior.component(static_cast<int>(c));
      Matrix draws(kCorrectionSamples, d);
      for (int s = 0; s < kCorrectionSamples; ++s) draws.row(s) = comp.sample(rng).transpose();
      i_hat[c] = correct_expected_log_joint(transform, comp, (*l_hat)[c], draws);
    }
  } else {
    throw ParseError("run file: one of 'L_hat' or 'I_hat' is required");
  }
  const Matrix jm = read_matrix(field(j, "J", ""), "J", k, k);
  const double elbo = number(field(j, "elbo", ""), "elbo");
  const json& conv = field(j, "converged", "");
  if (!conv.is_boolean()) throw ParseError("run file: field 'converged' must be a boolean");

  RunOutput run{std::move(posterior), std::move(transform), l_hat, i_hat, jm, elbo, conv.get<bool>(), {}};
  run.validate();
  return run;
}

void export_run(const RunOutput& run, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write run file " + path.string());
  out << run_to_json(run).dump(1) << '\n';
}

RunOutput import_run(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot read run file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("run file " + path.string() + ": " + e.what());
  }
  return run_from_json(j);
}

}  // namespace stackpost
