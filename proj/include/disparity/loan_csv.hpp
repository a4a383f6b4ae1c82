#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "disparity/loan.hpp"

namespace disparity {

// Loans CSV: header
//   id,gender,married,age,repeated,employment,education,past_failed,past_aborted,
//   past_ontime,past_late,amount,rate,app,express,province,funded,m0..m11
// with m0..m11 in {P, D, U}. Unfunded loans carry U in every month.
const std::string& loans_csv_header();

std::vector<LoanRecord> read_loans_csv(std::istream& in);
std::vector<LoanRecord> read_loans_csv(const std::filesystem::path& path);

void write_loans_csv(std::ostream& out, const std::vector<LoanRecord>& loans);
void write_loans_csv(const std::filesystem::path& path, const std::vector<LoanRecord>& loans);

// Shortest round-trip decimal text for a double.
std::string format_double(double value);

// Splits one CSV line on commas (no quoting; none of our fields need it).
std::vector<std::string> split_csv_line(const std::string& line);

}  // namespace disparity
