// Exact rational arithmetic for score means and agreement rates.
#pragma once

#include <compare>
#include <cstdint>
#include <string>

namespace forge {

/// Normalized num/den with den > 0 and gcd(|num|, den) == 1. Overflow throws.
class Rational {
 public:
  constexpr Rational() = default;
  Rational(std::int64_t num, std::int64_t den = 1);

  std::int64_t num() const { return num_; }
  std::int64_t den() const { return den_; }
  double to_double() const { return static_cast<double>(num_) / static_cast<double>(den_); }

  /// Decimal string rounded half away from zero at `places` digits, e.g. 1409/300 -> "4.70".
  std::string to_fixed(int places = 2) const;

  friend Rational operator+(const Rational& a, const Rational& b);
  friend Rational operator-(const Rational& a, const Rational& b);
  friend Rational operator*(const Rational& a, const Rational& b);
  friend Rational operator/(const Rational& a, const Rational& b);
  Rational& operator+=(const Rational& o) { return *this = *this + o; }

  friend bool operator==(const Rational& a, const Rational& b) = default;
  friend std::strong_ordering operator<=>(const Rational& a, const Rational& b);

 private:
  std::int64_t num_ = 0;
  std::int64_t den_ = 1;
};

}  // namespace forge
