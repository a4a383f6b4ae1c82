#include "disparity/loan_csv.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace disparity {

namespace {

const std::vector<std::string>& column_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n = {"id",          "gender",      "married",      "age",         "repeated",
                                  "employment",  "education",   "past_failed",  "past_aborted", "past_ontime",
                                  "past_late",   "amount",      "rate",         "app",         "express",
                                  "province",    "funded"};
    for (int m = 0; m < kTermMonths; ++m) n.push_back("m" + std::to_string(m));
    return n;
  }();
  return names;
}

class RowParser {
 public:
  RowParser(const std::vector<std::string>& fields, std::size_t row) : fields_(fields), row_(row) {}

  const std::string& text(std::size_t col) const { return fields_[col]; }

  double number(std::size_t col) const {
    const std::string& s = fields_[col];
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) fail(col, "expected a number");
    return v;
  }

  int integer(std::size_t col) const {
    const std::string& s = fields_[col];
    int v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) fail(col, "expected an integer");
    return v;
  }

  bool flag(std::size_t col) const {
    const std::string& s = fields_[col];
    if (s == "1") return true;
    if (s == "0") return false;
    fail(col, "expected 0 or 1");
  }

  PaymentStatus status(std::size_t col) const {
    const std::string& s = fields_[col];
    if (s == "P") return PaymentStatus::paid;
    if (s == "D") return PaymentStatus::defaulted;
    if (s == "U") return PaymentStatus::unobserved;
    fail(col, "expected P, D or U");
  }

  [[noreturn]] void fail(std::size_t col, const std::string& what) const {
    throw InvalidInput("loans csv row " + std::to_string(row_) + ", column '" + column_names()[col] + "': " + what +
                       " (got '" + fields_[col] + "')");
  }

 private:
  const std::vector<std::string>& fields_;
  std::size_t row_;
};

char status_code(PaymentStatus s) {
  switch (s) {
    case PaymentStatus::paid: return 'P';
    case PaymentStatus::defaulted: return 'D';
    case PaymentStatus::unobserved: return 'U';
  }
  return 'U';
}

}  // namespace

const std::string& loans_csv_header() {
  static const std::string header = [] {
    std::string h;
    for (const auto& c : column_names()) {
      if (!h.empty()) h += ',';
      h += c;
    }
    return h;
  }();
  return header;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string current;
  for (const char c : line) {
    if (c == ',') {
      fields.push_back(std::move(current));
      current.clear();
    } else if (c != '\r') {
      current.push_back(c);
    }
  }
  fields.push_back(std::move(current));
  return fields;
}

std::string format_double(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) throw Error("format", "cannot format number");
  return std::string(buf, ptr);
}

std::vector<LoanRecord> read_loans_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw InvalidInput("loans csv: missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
  if (line != loans_csv_header()) throw InvalidInput("loans csv: header must be exactly '" + loans_csv_header() + "'");

  const std::size_t ncol = column_names().size();
  std::vector<LoanRecord> loans;
  std::size_t row = 0;  // data rows, 1-based, header excluded
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    ++row;
    const auto fields = split_csv_line(line);
    if (fields.size() != ncol) {
      throw InvalidInput("loans csv row " + std::to_string(row) + ": expected " + std::to_string(ncol) +
                         " columns, got " + std::to_string(fields.size()));
    }
    const RowParser p(fields, row);
    LoanRecord r;
    r.id = p.text(0);
    if (r.id.empty()) p.fail(0, "empty id");
    try {
      r.gender = parse_gender(p.text(1));
    } catch (const InvalidInput&) {
      p.fail(1, "expected m or f");
    }
    r.x.married = p.flag(2);
    r.x.age = p.number(3);
    r.x.repeated = p.flag(4);
    r.x.employment = p.integer(5);
    if (r.x.employment < 0 || r.x.employment >= kEmploymentLevels) p.fail(5, "category must be 0..4");
    r.x.education = p.integer(6);
    if (r.x.education < 0 || r.x.education >= kEducationLevels) p.fail(6, "category must be 0..4");
    r.x.past_failed = p.number(7);
    r.x.past_aborted = p.number(8);
    r.x.past_ontime = p.number(9);
    r.x.past_late = p.number(10);
    r.x.amount = p.number(11);
    r.rate = p.number(12);
    r.x.app = p.flag(13);
    r.x.express = p.flag(14);
    r.x.province = p.integer(15);
    if (r.x.province < 0) p.fail(15, "category must be non-negative");
    r.funded = p.flag(16);
    PaymentHistory history{};
    bool any_observed = false;
    for (int m = 0; m < kTermMonths; ++m) {
      history[static_cast<std::size_t>(m)] = p.status(17 + static_cast<std::size_t>(m));
      any_observed = any_observed || history[static_cast<std::size_t>(m)] != PaymentStatus::unobserved;
    }
    if (r.funded) {
      r.payments = history;
    } else if (any_observed) {
      p.fail(17, "unfunded loan must have no observed payments");
    }
    loans.push_back(std::move(r));
  }
  return loans;
}

std::vector<LoanRecord> read_loans_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open loans csv: " + path.string());
  return read_loans_csv(in);
}

void write_loans_csv(std::ostream& out, const std::vector<LoanRecord>& loans) {
  out << loans_csv_header() << '\n';
  for (const LoanRecord& r : loans) {
    out << r.id << ',' << to_string(r.gender) << ',' << (r.x.married ? 1 : 0) << ',' << format_double(r.x.age) << ','
        << (r.x.repeated ? 1 : 0) << ',' << r.x.employment << ',' << r.x.education << ','
        << format_double(r.x.past_failed) << ',' << format_double(r.x.past_aborted) << ','
        << format_double(r.x.past_ontime) << ',' << format_double(r.x.past_late) << ',' << format_double(r.x.amount)
        << ',' << format_double(r.rate) << ',' << (r.x.app ? 1 : 0) << ',' << (r.x.express ? 1 : 0) << ','
        << r.x.province << ',' << (r.funded ? 1 : 0);
    for (int m = 0; m < kTermMonths; ++m) {
      out << ',' << (r.payments ? status_code((*r.payments)[static_cast<std::size_t>(m)]) : 'U');
    }
    out << '\n';
  }
}

void write_loans_csv(const std::filesystem::path& path, const std::vector<LoanRecord>& loans) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write loans csv: " + path.string());
  write_loans_csv(out, loans);
}

}  // namespace disparity
