#include "forge/rational.hpp"

#include <numeric>
#include <stdexcept>

namespace forge {

namespace {

__extension__ typedef __int128 i128;

std::int64_t checked_mul(std::int64_t a, std::int64_t b) {
  std::int64_t r;
  if (__builtin_mul_overflow(a, b, &r)) throw std::overflow_error("Rational: multiplication overflow");
  return r;
}

std::int64_t checked_add(std::int64_t a, std::int64_t b) {
  std::int64_t r;
  if (__builtin_add_overflow(a, b, &r)) throw std::overflow_error("Rational: addition overflow");
  return r;
}

}  // namespace

Rational::Rational(std::int64_t num, std::int64_t den) {
  if (den == 0) throw std::domain_error("Rational: zero denominator");
  if (den < 0) {
    num = -num;
    den = -den;
  }
  std::int64_t g = std::gcd(num, den);
  num_ = num / g;
  den_ = den / g;
}

Rational operator+(const Rational& a, const Rational& b) {
  std::int64_t g = std::gcd(a.den_, b.den_);
  std::int64_t lhs = checked_mul(a.num_, b.den_ / g);
  std::int64_t rhs = checked_mul(b.num_, a.den_ / g);
  return {checked_add(lhs, rhs), checked_mul(a.den_ / g, b.den_)};
}

Rational operator-(const Rational& a, const Rational& b) { return a + Rational(-b.num_, b.den_); }

Rational operator*(const Rational& a, const Rational& b) {
  std::int64_t g1 = std::gcd(a.num_, b.den_);
  std::int64_t g2 = std::gcd(b.num_, a.den_);
  if (g1 == 0) g1 = 1;
  if (g2 == 0) g2 = 1;
  return {checked_mul(a.num_ / g1, b.num_ / g2), checked_mul(a.den_ / g2, b.den_ / g1)};
}

Rational operator/(const Rational& a, const Rational& b) {
  if (b.num_ == 0) throw std::domain_error("Rational: division by zero");
  return a * Rational(b.den_, b.num_);
}

std::strong_ordering operator<=>(const Rational& a, const Rational& b) {
  i128 lhs = static_cast<i128>(a.num_) * b.den_;
  i128 rhs = static_cast<i128>(b.num_) * a.den_;
  if (lhs < rhs) return std::strong_ordering::less;
  if (lhs > rhs) return std::strong_ordering::greater;
  return std::strong_ordering::equal;
}

std::string Rational::to_fixed(int places) const {
  i128 scale = 1;
  for (int i = 0; i < places; ++i) scale *= 10;
  const bool negative = num_ < 0;
  i128 n = negative ? -static_cast<i128>(num_) : num_;
  // floor((n * scale) / den + 1/2) == floor((2 * n * scale + den) / (2 * den))
  i128 scaled = (2 * n * scale + den_) / (2 * static_cast<i128>(den_));
  i128 whole = scaled / scale;
  i128 frac = scaled % scale;

  std::string out = negative && scaled != 0 ? "-" : "";
  out += std::to_string(static_cast<long long>(whole));
  if (places > 0) {
    std::string f = std::to_string(static_cast<long long>(frac));
    out += '.';
    out += std::string(static_cast<std::size_t>(places) - f.size(), '0');
    out += f;
  }
  return out;
}

}  // namespace forge
