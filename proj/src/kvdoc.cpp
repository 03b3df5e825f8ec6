#include "arml/kvdoc.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace arml::io {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos])))
      ++pos;
    if (pos != s.size())
      throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("kvdoc: not a number: '" + s + "'");
  }
}

void KvDoc::set(const std::string& key, const std::string& value) {
  auto it = index_.find(key);
  if (it != index_.end()) {
    entries_[it->second].second = value;
    return;
  }
  index_[key] = entries_.size();
  entries_.emplace_back(key, value);
}

void KvDoc::set_int(const std::string& key, long long value) {
  set(key, std::to_string(value));
}

void KvDoc::set_double(const std::string& key, double value) {
  set(key, format_double(value));
}

void KvDoc::set_vector(const std::string& key, const Eigen::VectorXd& value) {
  std::string s;
  for (Eigen::Index i = 0; i < value.size(); ++i) {
    if (i) s += ' ';
    s += format_double(value[i]);
  }
  set(key, s);
}

bool KvDoc::has(const std::string& key) const { return index_.count(key) > 0; }

const std::string& KvDoc::get(const std::string& key) const {
  auto it = index_.find(key);
  if (it == index_.end())
    throw std::runtime_error("kvdoc: missing key '" + key + "'");
  return entries_[it->second].second;
}

long long KvDoc::get_int(const std::string& key) const {
  const std::string& s = get(key);
  try {
    std::size_t pos = 0;
    long long v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("kvdoc: key '" + key + "' is not an integer: '" +
                             s + "'");
  }
}

double KvDoc::get_double(const std::string& key) const {
  return parse_double(get(key));
}

Eigen::VectorXd KvDoc::get_vector(const std::string& key) const {
  std::istringstream in(get(key));
  std::vector<double> vals;
  std::string tok;
  while (in >> tok) vals.push_back(parse_double(tok));
  Eigen::VectorXd v(static_cast<Eigen::Index>(vals.size()));
  for (std::size_t i = 0; i < vals.size(); ++i)
    v[static_cast<Eigen::Index>(i)] = vals[i];
  return v;
}

std::string KvDoc::serialize() const {
  std::string out;
  for (const auto& [k, v] : entries_) {
    out += k;
    out += " = ";
    out += v;
    out += '\n';
  }
  return out;
}

KvDoc KvDoc::parse(const std::string& text) {
  KvDoc doc;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("kvdoc: line " + std::to_string(lineno) +
                               ": expected 'key = value'");
    auto trim = [](std::string s) {
      auto b = s.find_first_not_of(" \t\r");
      auto e = s.find_last_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      return s.substr(b, e - b + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error("kvdoc: line " + std::to_string(lineno) +
                               ": empty key");
    doc.set(key, value);
  }
  return doc;
}

void KvDoc::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("kvdoc: cannot write '" + path + "'");
  out << serialize();
}

KvDoc KvDoc::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("kvdoc: cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

}  // namespace arml::io
