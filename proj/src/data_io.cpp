#include "shrinkopt/data_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace shrinkopt {

namespace {

bool parse_double(std::string_view token, double& out) {
  // from_chars rejects a leading '+', which LIBSVM labels commonly use.
  if (!token.empty() && token.front() == '+') token.remove_prefix(1);
  if (token.empty()) return false;
  const auto result = std::from_chars(token.data(), token.data() + token.size(), out);
  return result.ec == std::errc() && result.ptr == token.data() + token.size() && std::isfinite(out);
}

bool parse_index(std::string_view token, long long& out) {
  if (token.empty()) return false;
  const auto result = std::from_chars(token.data(), token.data() + token.size(), out);
  return result.ec == std::errc() && result.ptr == token.data() + token.size();
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

Dataset parse_libsvm(std::string_view text, std::string source) {
  struct Row {
    double label;
    std::vector<std::pair<long long, double>> entries;
  };
  std::vector<Row> rows;
  long long max_index = 0;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find('#') != std::string_view::npos) throw ParseError("comments are not allowed", line_no);
    const auto tokens = split_ws(line);
    if (tokens.empty()) {
      if (end == text.size()) break;
      continue;
    }
    Row row;
    if (!parse_double(tokens[0], row.label))
      throw ParseError("non-numeric label '" + std::string(tokens[0]) + "'", line_no);
    long long previous = 0;
    for (std::size_t t = 1; t < tokens.size(); ++t) {
      const auto colon = tokens[t].find(':');
      if (colon == std::string_view::npos)
        throw ParseError("expected index:value, got '" + std::string(tokens[t]) + "'", line_no);
      long long idx;
      double value;
      if (!parse_index(tokens[t].substr(0, colon), idx) || idx < 1)
        throw ParseError("invalid feature index in '" + std::string(tokens[t]) + "'", line_no);
      if (!parse_double(tokens[t].substr(colon + 1), value))
        throw ParseError("non-numeric value in '" + std::string(tokens[t]) + "'", line_no);
      if (idx <= previous) throw ParseError("feature indices must be strictly ascending", line_no);
      previous = idx;
      max_index = std::max(max_index, idx);
      row.entries.emplace_back(idx, value);
    }
    rows.push_back(std::move(row));
    if (end == text.size()) break;
  }
  if (rows.empty()) throw ParseError("empty file", line_no);

  Dataset ds;
  ds.features = Matrix::Zero(static_cast<Index>(rows.size()), static_cast<Index>(max_index));
  ds.labels.resize(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    ds.labels(static_cast<Index>(i)) = rows[i].label;
    for (const auto& [idx, value] : rows[i].entries) ds.features(static_cast<Index>(i), idx - 1) = value;
  }
  ds.meta.source = std::move(source);
  return ds;
}

Dataset load_libsvm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_libsvm(buf.str(), path);
}

std::string write_libsvm(const Dataset& ds) {
  std::string out;
  for (Index i = 0; i < ds.rows(); ++i) {
    out += format_double(ds.labels(i));
    for (Index j = 0; j < ds.dim(); ++j) {
      const double v = ds.features(i, j);
      if (v != 0.0) out += " " + std::to_string(j + 1) + ":" + format_double(v);
    }
    out += '\n';
  }
  return out;
}

Dataset standardize(const Dataset& ds) {
  if (ds.rows() < 2) throw std::invalid_argument("standardize: need at least two rows");
  Dataset out = ds;
  out.meta.zero_variance_columns.clear();
  const double n = static_cast<double>(ds.rows());
  for (Index j = 0; j < ds.dim(); ++j) {
    auto col = out.features.col(j);
    const double mean = col.sum() / n;
    col.array() -= mean;
    const double sd = std::sqrt(col.squaredNorm() / n);
    if (sd > 0.0) {
      col /= sd;
    } else {
      out.meta.zero_variance_columns.push_back(j);
    }
  }
  out.meta.standardized = true;
  return out;
}

std::vector<double> distinct_classes(const Vector& labels) {
  std::vector<double> classes(labels.data(), labels.data() + labels.size());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  return classes;
}

Matrix one_hot(const Vector& labels) {
  const auto classes = distinct_classes(labels);
  if (classes.size() < 2) throw std::invalid_argument("one_hot: need at least two classes");
  Matrix out = Matrix::Zero(labels.size(), static_cast<Index>(classes.size()));
  for (Index i = 0; i < labels.size(); ++i) {
    const auto it = std::lower_bound(classes.begin(), classes.end(), labels(i));
    out(i, it - classes.begin()) = 1.0;
  }
  return out;
}

Vector to_sign_labels(const Vector& labels) {
  const auto classes = distinct_classes(labels);
  if (classes.size() != 2)
    throw std::invalid_argument("logistic labels need exactly two classes, found " +
                                std::to_string(classes.size()));
  Vector out(labels.size());
  for (Index i = 0; i < labels.size(); ++i) out(i) = labels(i) == classes[0] ? -1.0 : 1.0;
  return out;
}

CovarianceSpec CovarianceSpec::identity_scaled(Index dim, double c) {
  if (dim < 1 || !(c > 0.0)) throw std::invalid_argument("identity_scaled: need dim >= 1 and c > 0");
  return {Kind::IdentityScaled, dim, c};
}

CovarianceSpec CovarianceSpec::random_gram(Index dim, double scale) {
  if (dim < 1 || !(scale > 0.0)) throw std::invalid_argument("random_gram: need dim >= 1 and scale > 0");
  return {Kind::RandomGram, dim, scale};
}

CovarianceSpec CovarianceSpec::power_law(Index dim, double exponent) {
  if (dim < 1 || !(exponent >= 0.0)) throw std::invalid_argument("power_law: need dim >= 1 and exponent >= 0");
  return {Kind::PowerLaw, dim, exponent};
}

SpdMatrix CovarianceSpec::materialize(RngStream& stream) const {
  switch (kind_) {
    case Kind::IdentityScaled: return SpdMatrix::identity(dim_, parameter_);
    case Kind::PowerLaw: {
      Vector diag(dim_);
      for (Index j = 0; j < dim_; ++j) diag(j) = std::pow(static_cast<double>(j + 1), -parameter_);
      return SpdMatrix::diagonal(diag);
    }
    case Kind::RandomGram: {
      Matrix c(dim_, dim_);
      for (Index j = 0; j < dim_; ++j)
        for (Index i = 0; i < dim_; ++i) c(i, j) = stream.next_uniform();
      SpdMatrix sigma(parameter_ * c.transpose() * c);
      if (!sigma.is_positive_definite()) sigma = sigma.shifted(1e-8);
      return sigma;
    }
  }
  throw std::logic_error("unknown covariance kind");
}

Matrix sample_gaussian_rows(Index n, const SpdMatrix& sigma, RngStream& stream) {
  const Matrix& lower = sigma.cholesky_factor();
  // Each row is a standard normal vector z mapped to L z.
  const Matrix z = gaussian_matrix(sigma.dim(), n, 1.0, stream);
  return (lower * z).transpose();
}

Dataset synth_gaussian(Index n, const SpdMatrix& sigma, RngStream& stream) {
  Dataset ds;
  ds.features = sample_gaussian_rows(n, sigma, stream);
  ds.labels = Vector::Zero(n);
  ds.meta.source = "synthetic gaussian";
  return ds;
}

Dataset synth_gaussian(Index n, const CovarianceSpec& spec, RngStream& stream) {
  const SpdMatrix sigma = spec.materialize(stream);
  return synth_gaussian(n, sigma, stream);
}

Vector synth_linear_targets(const Matrix& features, double noise_std, RngStream& stream) {
  const Index d = features.cols();
  Vector w(d);
  for (Index j = 0; j < d; ++j) w(j) = stream.next_normal() / std::sqrt(static_cast<double>(d));
  Vector b = features * w;
  for (Index i = 0; i < b.size(); ++i) b(i) += noise_std * stream.next_normal();
  return b;
}

std::vector<Index> random_permutation(Index n, RngStream& stream) {
  std::vector<Index> perm(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  for (Index i = n - 1; i > 0; --i) {
    const auto j = static_cast<Index>(stream.next_below(static_cast<std::uint64_t>(i + 1)));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  return perm;
}

SplitDataset permute_and_split(const Dataset& ds, Index agents, RngStream& stream) {
  if (agents < 1) throw std::invalid_argument("permute_and_split: need at least one agent");
  if (agents > ds.rows()) throw std::invalid_argument("permute_and_split: more agents than rows");
  const auto perm = random_permutation(ds.rows(), stream);
  SplitDataset out;
  out.agents = agents;
  out.rows_per_agent = ds.rows() / agents;
  const Index kept = out.agents * out.rows_per_agent;
  out.data.features.resize(kept, ds.dim());
  out.data.labels.resize(kept);
  for (Index i = 0; i < kept; ++i) {
    const Index src = perm[static_cast<std::size_t>(i)];
    out.data.features.row(i) = ds.features.row(src);
    out.data.labels(i) = ds.labels(src);
  }
  out.data.meta = ds.meta;
  out.data.meta.permutation_seed = stream.seed();
  return out;
}

}  // namespace shrinkopt
