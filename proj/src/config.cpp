#include "edsolve/cli_io.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

namespace edsolve {

namespace {

std::string with_position(const std::string& what, int line, int column) {
  if (line <= 0) return what;
  return "line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + what;
}

struct Value {
  enum class Kind { number, string, boolean, array } kind = Kind::number;
  double number = 0.0;
  bool integral = false;
  bool boolean = false;
  std::string text;
  std::vector<Value> items;
  int line = 0;
  int column = 0;
};

class Parser {
 public:
  Parser(const std::string& line, int line_no) : s_(line), line_(line_no) {}

  [[noreturn]] void fail(const std::string& what) const { throw ConfigError(what, line_, pos_ + 1); }

  void skip_ws() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }
  bool at_end() {
    skip_ws();
    return pos_ >= s_.size() || s_[pos_] == '#';
  }
  bool peek(char c) {
    skip_ws();
    return pos_ < s_.size() && s_[pos_] == c;
  }
  void expect(char c) {
    if (!peek(c)) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  std::string key() {
    skip_ws();
    std::string out;
    for (;;) {
      const size_t start = pos_;
      while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_' || s_[pos_] == '-'))
        ++pos_;
      if (pos_ == start) fail("expected a key");
      out += s_.substr(start, pos_ - start);
      if (pos_ < s_.size() && s_[pos_] == '.') {
        out += '.';
        ++pos_;
        continue;
      }
      return out;
    }
  }

  Value value() {
    skip_ws();
    Value v;
    v.line = line_;
    v.column = static_cast<int>(pos_) + 1;
    if (pos_ >= s_.size()) fail("missing value");
    const char c = s_[pos_];
    if (c == '"') {
      v.kind = Value::Kind::string;
      ++pos_;
      while (pos_ < s_.size() && s_[pos_] != '"') {
        if (s_[pos_] == '\\') {
          if (pos_ + 1 >= s_.size()) fail("unterminated escape");
          const char e = s_[pos_ + 1];
          if (e == '"' || e == '\\')
            v.text += e;
          else if (e == 'n')
            v.text += '\n';
          else if (e == 't')
            v.text += '\t';
          else
            fail(std::string("unsupported escape '\\") + e + "'");
          pos_ += 2;
        } else {
          v.text += s_[pos_++];
        }
      }
      if (pos_ >= s_.size()) fail("unterminated string");
      ++pos_;
      return v;
    }
    if (c == '[') {
      v.kind = Value::Kind::array;
      ++pos_;
      if (peek(']')) {
        ++pos_;
        return v;
      }
      for (;;) {
        Value item = value();
        if (item.kind == Value::Kind::array) fail("nested arrays are not supported");
        v.items.push_back(std::move(item));
        if (peek(',')) {
          ++pos_;
          if (peek(']')) {
            ++pos_;
            return v;
          }
          continue;
        }
        expect(']');
        return v;
      }
    }
    if (s_.compare(pos_, 4, "true") == 0 || s_.compare(pos_, 5, "false") == 0) {
      v.kind = Value::Kind::boolean;
      v.boolean = s_[pos_] == 't';
      pos_ += v.boolean ? 4 : 5;
      return v;
    }
    size_t end = pos_;
    while (end < s_.size() && std::string("+-0123456789.eE").find(s_[end]) != std::string::npos) ++end;
    const char* first = s_.data() + pos_ + (s_[pos_] == '+' ? 1 : 0);
    const auto [ptr, ec] = std::from_chars(first, s_.data() + end, v.number);
    if (ec != std::errc() || ptr != s_.data() + end || end == pos_) fail("malformed value");
    if (!std::isfinite(v.number)) fail("value is not finite");
    v.integral = s_.substr(pos_, end - pos_).find_first_of(".eE") == std::string::npos;
    pos_ = end;
    return v;
  }

  size_t pos() const { return pos_; }

 private:
  const std::string& s_;
  int line_;
  size_t pos_ = 0;
};

// Prefixes the source name while keeping the recorded position.
ConfigError from_source(const std::string& source, const ConfigError& e) {
  ConfigError out(source + ": " + e.what());
  out.line = e.line;
  out.column = e.column;
  return out;
}

[[noreturn]] void bad(const Value& v, const std::string& what) { throw ConfigError(what, v.line, v.column); }

double as_number(const Value& v, const std::string& key) {
  if (v.kind != Value::Kind::number) bad(v, key + " must be a number");
  return v.number;
}

double positive(const Value& v, const std::string& key) {
  const double x = as_number(v, key);
  if (!(x > 0.0)) bad(v, key + " must be positive");
  return x;
}

int as_int(const Value& v, const std::string& key, int lo) {
  const double x = as_number(v, key);
  if (!v.integral) bad(v, key + " must be an integer");
  if (x < lo) bad(v, key + " must be >= " + std::to_string(lo));
  if (x > 1e9) bad(v, key + " is too large");
  return static_cast<int>(x);
}

std::string as_string(const Value& v, const std::string& key) {
  if (v.kind != Value::Kind::string) bad(v, key + " must be a quoted string");
  return v.text;
}

struct KeySpec {
  const char* key;
  const char* doc;
  std::function<void(RunConfig&, const Value&)> apply;
};

// eps_max given as a fraction of m is resolved after every key is read.
struct Pending {
  std::optional<double> eps_fraction = 0.1;
};

const std::set<std::string>& emit_choices() {
  static const std::set<std::string> s{"profiles", "branch", "certificates", "matrices"};
  return s;
}

std::vector<KeySpec> key_table(Pending& pending) {
  std::vector<KeySpec> k;
  k.push_back({"m", "mass m > 0 (default 0.5)", [](RunConfig& c, const Value& v) { c.m = positive(v, "m"); }});
  k.push_back({"eps_max", "largest eps = m - omega; number or \"<f>m\" (default \"0.1m\")",
               [&pending](RunConfig& c, const Value& v) {
                 if (v.kind == Value::Kind::string) {
                   std::string t = v.text;
                   if (t.empty() || t.back() != 'm') bad(v, "eps_max string must look like \"0.1m\"");
                   t.pop_back();
                   double f = 0.0;
                   const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), f);
                   if (ec != std::errc() || ptr != t.data() + t.size() || !(f > 0.0 && f < 1.0))
                     bad(v, "eps_max fraction must lie in (0, 1)");
                   pending.eps_fraction = f;
                 } else {
                   c.eps_max = positive(v, "eps_max");
                   pending.eps_fraction.reset();
                 }
               }});
  k.push_back({"outputs", "output directory (default \"edsolve_out\")",
               [](RunConfig& c, const Value& v) {
                 c.outputs = as_string(v, "outputs");
                 if (c.outputs.empty()) bad(v, "outputs must not be empty");
               }});
  k.push_back({"emit", "subset of [\"profiles\", \"branch\", \"certificates\", \"matrices\"] (default first three)",
               [](RunConfig& c, const Value& v) {
                 if (v.kind != Value::Kind::array) bad(v, "emit must be an array of strings");
                 std::set<std::string> out;
                 for (const auto& item : v.items) {
                   const std::string s = as_string(item, "emit entry");
                   if (!emit_choices().count(s)) bad(item, "unknown emit entry '" + s + "'");
                   out.insert(s);
                 }
                 c.emit = out;
               }});
  k.push_back({"grid.n_nodes", "number of radial nodes, >= 16 (default 2000)",
               [](RunConfig& c, const Value& v) { c.grid.n_nodes = as_int(v, "grid.n_nodes", 16); }});
  k.push_back({"grid.r_max", "truncation radius or \"auto\" = 30/sqrt(2m) (default \"auto\")",
               [](RunConfig& c, const Value& v) {
                 if (v.kind == Value::Kind::string) {
                   if (v.text != "auto") bad(v, "grid.r_max must be a number or \"auto\"");
                   c.grid.r_max.reset();
                 } else {
                   c.grid.r_max = positive(v, "grid.r_max");
                 }
               }});
  k.push_back({"grid.grading_exponent", "grading p >= 1 of r_j = r_max (j/N)^p (default 2)",
               [](RunConfig& c, const Value& v) {
                 const double p = as_number(v, "grid.grading_exponent");
                 if (!(p >= 1.0)) bad(v, "grid.grading_exponent must be >= 1");
                 c.grid.grading_exponent = p;
               }});
  k.push_back({"choquard.scf_mixing", "SCF potential mixing in (0, 1] (default 0.5)",
               [](RunConfig& c, const Value& v) {
                 const double x = as_number(v, "choquard.scf_mixing");
                 if (!(x > 0.0 && x <= 1.0)) bad(v, "choquard.scf_mixing must lie in (0, 1]");
                 c.choquard.scf_mixing = x;
               }});
  k.push_back({"choquard.scf_tol", "relative SCF tolerance on lambda (default 1e-8)",
               [](RunConfig& c, const Value& v) { c.choquard.scf_tol = positive(v, "choquard.scf_tol"); }});
  k.push_back({"choquard.newton_tol", "Choquard residual tolerance (default 1e-10)",
               [](RunConfig& c, const Value& v) { c.choquard.newton_tol = positive(v, "choquard.newton_tol"); }});
  k.push_back({"choquard.max_scf", "SCF iteration cap (default 2000)",
               [](RunConfig& c, const Value& v) { c.choquard.max_scf = as_int(v, "choquard.max_scf", 1); }});
  k.push_back({"choquard.max_newton", "Choquard Newton cap (default 40)",
               [](RunConfig& c, const Value& v) { c.choquard.max_newton = as_int(v, "choquard.max_newton", 1); }});
  k.push_back({"solver.delta_A", "metric positivity floor in (0, 1) (default 0.05)",
               [](RunConfig& c, const Value& v) {
                 const double x = as_number(v, "solver.delta_A");
                 if (!(x > 0.0 && x < 1.0)) bad(v, "solver.delta_A must lie in (0, 1)");
                 c.solver.delta_A = x;
               }});
  k.push_back({"solver.newton_tol", "tolerance on each rescaled residual norm (default 1e-10)",
               [](RunConfig& c, const Value& v) { c.solver.newton_tol = positive(v, "solver.newton_tol"); }});
  k.push_back({"solver.max_newton", "Newton iteration cap per point (default 12)",
               [](RunConfig& c, const Value& v) { c.solver.max_newton = as_int(v, "solver.max_newton", 1); }});
  k.push_back({"solver.ball_radius", "Newton ball radius in units of the base norms, > 1 (default 2)",
               [](RunConfig& c, const Value& v) {
                 const double x = as_number(v, "solver.ball_radius");
                 if (!(x > 1.0)) bad(v, "solver.ball_radius must exceed 1");
                 c.solver.ball_radius = x;
               }});
  k.push_back({"solver.initial_step", "first eps step as a fraction of eps_max (default 1e-3)",
               [](RunConfig& c, const Value& v) { c.solver.initial_step = positive(v, "solver.initial_step"); }});
  k.push_back({"solver.max_step", "largest eps step as a fraction of eps_max (default 0.05)",
               [](RunConfig& c, const Value& v) { c.solver.max_step = positive(v, "solver.max_step"); }});
  k.push_back({"solver.min_step", "step underflow threshold as a fraction of m (default 1e-6)",
               [](RunConfig& c, const Value& v) { c.solver.min_step = positive(v, "solver.min_step"); }});
  k.push_back({"solver.growth", "step growth after a fast point, >= 1 (default 1.5)",
               [](RunConfig& c, const Value& v) { c.solver.growth = positive(v, "solver.growth"); }});
  k.push_back({"solver.shrink", "step factor after a failure, in (0, 1) (default 0.5)",
               [](RunConfig& c, const Value& v) { c.solver.shrink = positive(v, "solver.shrink"); }});
  k.push_back({"solver.fast_iterations", "Newton count that still lets the step grow (default 4)",
               [](RunConfig& c, const Value& v) {
                 c.solver.fast_iterations = as_int(v, "solver.fast_iterations", 1);
               }});
  return k;
}

}  // namespace

ConfigError::ConfigError(const std::string& what, int line, int column)
    : ParameterError(with_position(what, line, column)), line(line), column(column) {}

double RunConfig::r_max() const { return grid.r_max ? *grid.r_max : default_r_max(m); }

void RunConfig::validate() const {
  try {
    if (!(m > 0.0)) throw ConfigError("m must be positive");
    if (grid.n_nodes < 16) throw ConfigError("grid.n_nodes must be >= 16");
    if (!(grid.grading_exponent >= 1.0)) throw ConfigError("grid.grading_exponent must be >= 1");
    if (!(eps_max > 0.0 && eps_max < m)) throw ConfigError("eps_max must lie in (0, m)");
    if (r_max() * std::sqrt(2.0 * m) < 20.0) throw ConfigError("grid.r_max is too small to resolve the decay scale");
    if (outputs.empty()) throw ConfigError("outputs must not be empty");
    for (const auto& e : emit)
      if (!emit_choices().count(e)) throw ConfigError("unknown emit entry '" + e + "'");
    choquard.validate();
    solver.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
}

RunConfig parse_config_text(const std::string& text, const std::string& source) {
  RunConfig cfg;
  Pending pending;
  const std::vector<KeySpec> keys = key_table(pending);
  std::map<std::string, const KeySpec*> index;
  for (const auto& k : keys) index[k.key] = &k;
  std::set<std::string> seen;
  static const std::set<std::string> tables{"grid", "choquard", "solver"};

  std::istringstream in(text);
  std::string line, table;
  int line_no = 0;
  try {
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      Parser p(line, line_no);
      if (p.at_end()) continue;
      if (p.peek('[')) {
        p.expect('[');
        const std::string name = p.key();
        p.expect(']');
        if (!p.at_end()) p.fail("unexpected text after table header");
        if (!tables.count(name)) throw ConfigError("unknown table [" + name + "]", line_no, 1);
        table = name;
        continue;
      }
      const int key_col = static_cast<int>(p.pos()) + 1;
      const std::string k = p.key();
      const std::string full = table.empty() ? k : table + "." + k;
      p.expect('=');
      const Value v = p.value();
      if (!p.at_end()) p.fail("unexpected text after value");
      const auto it = index.find(full);
      if (it == index.end()) throw ConfigError("unknown key '" + full + "'", line_no, key_col);
      if (!seen.insert(full).second) throw ConfigError("duplicate key '" + full + "'", line_no, key_col);
      it->second->apply(cfg, v);
    }
  } catch (const ConfigError& e) {
    throw from_source(source, e);
  }
  if (pending.eps_fraction) cfg.eps_max = *pending.eps_fraction * cfg.m;
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw from_source(source, e);
  }
  return cfg;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), path);
}

std::string config_reference() {
  Pending pending;
  std::ostringstream os;
  os << "Config keys (key = value, [grid]/[choquard]/[solver] tables or dotted keys):\n";
  for (const auto& k : key_table(pending)) os << "  " << k.key << "\n      " << k.doc << "\n";
  return os.str();
}

std::set<std::string> parse_emit_list(const std::string& list) {
  std::set<std::string> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    item = item.substr(b, e - b + 1);
    if (!emit_choices().count(item)) throw ConfigError("unknown emit entry '" + item + "'");
    out.insert(item);
  }
  return out;
}

void ensure_writable_directory(const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::exists(dir, ec)) {
    if (!fs::create_directories(dir, ec) || ec) throw ConfigError("cannot create output directory '" + dir + "'");
  }
  if (!fs::is_directory(dir, ec)) throw ConfigError("output path '" + dir + "' is not a directory");
  const fs::path probe = fs::path(dir) / ".edsolve_write_probe";
  {
    std::ofstream f(probe);
    if (!f || !(f << "x") || !f.flush()) throw ConfigError("output directory '" + dir + "' is not writable");
  }
  fs::remove(probe, ec);
}

}  // namespace edsolve
