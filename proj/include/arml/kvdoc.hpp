#pragma once

#include <Eigen/Dense>
#include <map>
#include <string>
#include <vector>

namespace arml::io {

// Ordered key/value text document. One "key = value" pair per line, '#'
// starts a comment. Doubles are rendered with 17 significant digits so
// serialized checkpoints round-trip bit-exactly.
class KvDoc {
 public:
  void set(const std::string& key, const std::string& value);
  void set_int(const std::string& key, long long value);
  void set_double(const std::string& key, double value);
  void set_vector(const std::string& key, const Eigen::VectorXd& value);

  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  long long get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  Eigen::VectorXd get_vector(const std::string& key) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const {
    return entries_;
  }

  std::string serialize() const;
  static KvDoc parse(const std::string& text);

  void save(const std::string& path) const;
  static KvDoc load(const std::string& path);

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
  std::map<std::string, std::size_t> index_;
};

std::string format_double(double v);   // %.17g
double parse_double(const std::string& s);

}  // namespace arml::io
