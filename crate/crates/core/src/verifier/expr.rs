//! Canonical answer expressions and their equivalence.

use std::sync::LazyLock;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use regex::Regex;

/// A parsed final answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnswerExpr {
    Integer(BigInt),
    /// Reduced fraction with positive denominator.
    Rational(BigRational),
    /// Exact decimal `digits × 10^exponent`, sign kept separately.
    /// Canonical: no leading zeros, no trailing zeros (zero is `"0"`, `0`,
    /// non-negative).
    Decimal {
        negative: bool,
        digits: String,
        exponent: i64,
    },
    Interval {
        lower: Box<AnswerExpr>,
        upper: Box<AnswerExpr>,
        lower_closed: bool,
        upper_closed: bool,
    },
    Tuple(Vec<AnswerExpr>),
    /// Whitespace-free, lowercased text that did not parse as anything else.
    RawString(String),
}

const MAX_DEPTH: usize = 16;

static FRAC: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\\frac\s*\{([^{}]*)\}\s*\{([^{}]*)\}").unwrap());
static TEXT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\\(?:text|mathrm|mbox)\s*\{([^{}]*)\}").unwrap());
static ASSIGN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[A-Za-z]\s*=\s*(.+)$").unwrap());
static INTEGER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^([+-]?)([0-9]+)$").unwrap());
static DECIMAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^([+-]?)([0-9]*)\.([0-9]*)$").unwrap());

/// Strips LaTeX decoration that does not change the value.
fn normalize(text: &str) -> String {
    let mut s = text.trim().to_string();
    for (from, to) in [
        ("\\dfrac", "\\frac"),
        ("\\tfrac", "\\frac"),
        ("\\left", ""),
        ("\\right", ""),
        ("\\!", ""),
        ("\\,", ""),
        ("\\;", ""),
        ("\\%", "%"),
        ("{,}", ""),
        ("\\infty", "inf"),
    ] {
        s = s.replace(from, to);
    }
    s = TEXT.replace_all(&s, "$1").into_owned();
    // innermost fractions first, until none remain
    loop {
        let next = FRAC.replace_all(&s, "($1)/($2)").into_owned();
        if next == s {
            break;
        }
        s = next;
    }
    let mut s = s.trim();
    loop {
        let before = s;
        for (open, close) in [("$", "$"), ("\\(", "\\)"), ("\\[", "\\]")] {
            if s.len() >= open.len() + close.len() && s.starts_with(open) && s.ends_with(close) {
                s = s[open.len()..s.len() - close.len()].trim();
            }
        }
        s = s.trim_end_matches('.').trim();
        if s == before {
            break;
        }
    }
    match ASSIGN.captures(s) {
        Some(c) => c[1].trim().to_string(),
        None => s.to_string(),
    }
}

fn raw(text: &str) -> AnswerExpr {
    AnswerExpr::RawString(
        text.chars()
            .filter(|c| !c.is_whitespace())
            .flat_map(char::to_lowercase)
            .collect(),
    )
}

/// Parses an answer string. Never fails: anything unrecognized becomes a
/// [`AnswerExpr::RawString`].
pub fn parse_answer(text: &str) -> AnswerExpr {
    let normalized = normalize(text);
    parse_expr(&normalized, 0)
}

fn parse_expr(s: &str, depth: usize) -> AnswerExpr {
    let s = s.trim();
    if depth > MAX_DEPTH {
        return raw(s);
    }
    if let Some(rest) = strip_prefix_ci(s, "interval:") {
        return parse_bracketed(rest.trim(), depth, true).unwrap_or_else(|| raw(s));
    }
    if let Some(expr) = parse_bracketed(s, depth, false) {
        return expr;
    }
    let parts = split_top_level(s);
    if parts.len() > 1 {
        return AnswerExpr::Tuple(parts.iter().map(|p| parse_expr(p, depth + 1)).collect());
    }
    parse_scalar(s).unwrap_or_else(|| raw(s))
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &s[prefix.len()..])
}

/// `(a, b, ...)` is a tuple; a two-element list using any square bracket is
/// an interval. With `force_interval`, `(a, b)` is an open interval.
fn parse_bracketed(s: &str, depth: usize, force_interval: bool) -> Option<AnswerExpr> {
    let open = s.chars().next()?;
    let close = s.chars().last()?;
    if s.len() < 2 || !matches!(open, '(' | '[') || !matches!(close, ')' | ']') {
        return None;
    }
    let inner = &s[1..s.len() - 1];
    if !brackets_balanced(inner) {
        return None;
    }
    let parts = split_top_level(inner);
    let is_interval = force_interval || open == '[' || close == ']';
    if is_interval {
        if parts.len() != 2 {
            return None;
        }
        return Some(AnswerExpr::Interval {
            lower: Box::new(parse_expr(parts[0], depth + 1)),
            upper: Box::new(parse_expr(parts[1], depth + 1)),
            lower_closed: open == '[',
            upper_closed: close == ']',
        });
    }
    if parts.len() < 2 {
        // plain grouping parentheses
        return Some(parse_expr(inner, depth + 1));
    }
    Some(AnswerExpr::Tuple(
        parts.iter().map(|p| parse_expr(p, depth + 1)).collect(),
    ))
}

fn brackets_balanced(s: &str) -> bool {
    let mut depth = 0i64;
    for ch in s.chars() {
        match ch {
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => {}
        }
    }
    depth == 0
}

fn split_top_level(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i64;
    let mut start = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

fn parse_scalar(s: &str) -> Option<AnswerExpr> {
    let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if let Some(body) = compact.strip_suffix('%') {
        let value = parse_number(body, 0)?;
        return Some(AnswerExpr::Rational(value.to_ratio() / BigRational::from_integer(100.into())));
    }
    parse_number(&compact, 0)
}

fn parse_number(s: &str, depth: usize) -> Option<AnswerExpr> {
    if depth > MAX_DEPTH {
        return None;
    }
    let s = strip_grouping(s);
    if let Some(c) = INTEGER.captures(s) {
        let mut n: BigInt = c[2].parse().ok()?;
        if &c[1] == "-" {
            n = -n;
        }
        return Some(AnswerExpr::Integer(n));
    }
    if let Some(c) = DECIMAL.captures(s) {
        if c[2].is_empty() && c[3].is_empty() {
            return None;
        }
        return Some(decimal(&c[1] == "-", &c[2], &c[3]));
    }
    let (num, den) = split_fraction(s)?;
    let num = parse_number(num, depth + 1)?.to_ratio();
    let den = parse_number(den, depth + 1)?.to_ratio();
    if den.is_zero() {
        return None;
    }
    Some(AnswerExpr::Rational(num / den))
}

/// Splits at the single top-level `/`.
fn split_fraction(s: &str) -> Option<(&str, &str)> {
    let mut depth = 0i64;
    let mut at = None;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            '/' if depth == 0 => {
                if at.is_some() {
                    return None;
                }
                at = Some(i);
            }
            _ => {}
        }
    }
    let i = at?;
    Some((&s[..i], &s[i + 1..]))
}

/// `(x)` → `x`, as produced by fraction rewriting.
fn strip_grouping(s: &str) -> &str {
    let mut s = s;
    while s.len() >= 2 && s.starts_with('(') && s.ends_with(')') && brackets_balanced(&s[1..s.len() - 1]) {
        s = &s[1..s.len() - 1];
    }
    s
}

fn decimal(negative: bool, int_part: &str, frac_part: &str) -> AnswerExpr {
    let mut digits = format!("{int_part}{frac_part}");
    let mut exponent = -(frac_part.len() as i64);
    let trimmed = digits.trim_start_matches('0');
    digits = trimmed.to_string();
    while digits.ends_with('0') {
        digits.pop();
        exponent += 1;
    }
    if digits.is_empty() {
        return AnswerExpr::Decimal {
            negative: false,
            digits: "0".into(),
            exponent: 0,
        };
    }
    AnswerExpr::Decimal {
        negative,
        digits,
        exponent,
    }
}

fn pow10(exp: u64) -> BigInt {
    num_traits::pow(BigInt::from(10), exp as usize)
}

impl AnswerExpr {
    /// Exact value of a numeric expression.
    pub fn value(&self) -> Option<BigRational> {
        match self {
            AnswerExpr::Integer(n) => Some(BigRational::from_integer(n.clone())),
            AnswerExpr::Rational(r) => Some(r.clone()),
            AnswerExpr::Decimal { .. } => Some(self.to_ratio()),
            _ => None,
        }
    }

    fn to_ratio(&self) -> BigRational {
        match self {
            AnswerExpr::Integer(n) => BigRational::from_integer(n.clone()),
            AnswerExpr::Rational(r) => r.clone(),
            AnswerExpr::Decimal {
                negative,
                digits,
                exponent,
            } => {
                let mantissa: BigInt = digits.parse().unwrap_or_default();
                let mantissa = if *negative { -mantissa } else { mantissa };
                if *exponent >= 0 {
                    BigRational::from_integer(mantissa * pow10(*exponent as u64))
                } else {
                    BigRational::new(mantissa, pow10(exponent.unsigned_abs()))
                }
            }
            _ => BigRational::zero(),
        }
    }

    fn is_decimal(&self) -> bool {
        matches!(self, AnswerExpr::Decimal { .. })
    }
}

/// True when the decimal expansion of `r` terminates.
pub fn terminates(r: &BigRational) -> bool {
    let mut den = r.denom().abs();
    for p in [2u32, 5] {
        let p = BigInt::from(p);
        while den.is_multiple_of(&p) {
            den /= &p;
        }
    }
    den.is_one()
}

/// Equivalence under the verifier's rules. Symmetric by construction.
pub fn equivalent(a: &AnswerExpr, b: &AnswerExpr, rel_tol: &BigRational) -> bool {
    use AnswerExpr::*;
    match (a, b) {
        (Tuple(xs), Tuple(ys)) => {
            xs.len() == ys.len() && xs.iter().zip(ys).all(|(x, y)| equivalent(x, y, rel_tol))
        }
        (
            Interval {
                lower: l1,
                upper: u1,
                lower_closed: lc1,
                upper_closed: uc1,
            },
            Interval {
                lower: l2,
                upper: u2,
                lower_closed: lc2,
                upper_closed: uc2,
            },
        ) => lc1 == lc2 && uc1 == uc2 && equivalent(l1, l2, rel_tol) && equivalent(u1, u2, rel_tol),
        (RawString(x), RawString(y)) => x == y,
        _ => match (a.value(), b.value()) {
            (Some(x), Some(y)) => {
                let tolerant = (a.is_decimal() && !b.is_decimal() && !terminates(&y))
                    || (b.is_decimal() && !a.is_decimal() && !terminates(&x));
                if tolerant {
                    let (approx, exact) = if a.is_decimal() { (&x, &y) } else { (&y, &x) };
                    (approx - exact).abs() <= rel_tol * exact.abs()
                } else {
                    x == y
                }
            }
            _ => false,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rat(n: i64, d: i64) -> AnswerExpr {
        AnswerExpr::Rational(BigRational::new(n.into(), d.into()))
    }

    fn int(n: i64) -> AnswerExpr {
        AnswerExpr::Integer(n.into())
    }

    #[test]
    fn parses_scalars() {
        assert_eq!(parse_answer("42"), int(42));
        assert_eq!(parse_answer("-7"), int(-7));
        assert_eq!(parse_answer("1/2"), rat(1, 2));
        assert_eq!(parse_answer("2/-4"), rat(-1, 2));
        assert_eq!(parse_answer("50%"), rat(1, 2));
        assert_eq!(parse_answer("12.5\\%"), rat(1, 8));
        assert_eq!(parse_answer("\\frac{3}{4}"), rat(3, 4));
        assert_eq!(parse_answer("\\dfrac{-3}{6}"), rat(-1, 2));
        assert_eq!(parse_answer("$x = 5$"), int(5));
        assert_eq!(
            parse_answer("0.50"),
            AnswerExpr::Decimal {
                negative: false,
                digits: "5".into(),
                exponent: -1
            }
        );
        assert_eq!(
            parse_answer("-120.0"),
            AnswerExpr::Decimal {
                negative: true,
                digits: "12".into(),
                exponent: 1
            }
        );
        assert_eq!(
            parse_answer("-0.000"),
            AnswerExpr::Decimal {
                negative: false,
                digits: "0".into(),
                exponent: 0
            }
        );
    }

    #[test]
    fn zero_denominator_is_raw() {
        assert_eq!(parse_answer("1/0"), AnswerExpr::RawString("1/0".into()));
    }

    #[test]
    fn parses_tuples_and_intervals() {
        // hand-built oracle for the tuple disambiguation rule
        assert_eq!(parse_answer("(1, 2)"), AnswerExpr::Tuple(vec![int(1), int(2)]));
        assert_eq!(parse_answer("1, 2, 3"), AnswerExpr::Tuple(vec![int(1), int(2), int(3)]));
        assert_eq!(
            parse_answer("((1,2),3)"),
            AnswerExpr::Tuple(vec![AnswerExpr::Tuple(vec![int(1), int(2)]), int(3)])
        );
        assert_eq!(
            parse_answer("[0, 1/2)"),
            AnswerExpr::Interval {
                lower: Box::new(int(0)),
                upper: Box::new(rat(1, 2)),
                lower_closed: true,
                upper_closed: false,
            }
        );
        assert_eq!(
            parse_answer("interval:(1, 2)"),
            AnswerExpr::Interval {
                lower: Box::new(int(1)),
                upper: Box::new(int(2)),
                lower_closed: false,
                upper_closed: false,
            }
        );
        assert_eq!(parse_answer("(3)"), int(3));
    }

    #[test]
    fn raw_fallback_is_normalized() {
        assert_eq!(parse_answer("  X + 1 "), AnswerExpr::RawString("x+1".into()));
        assert_eq!(parse_answer("\\text{Blue}"), AnswerExpr::RawString("blue".into()));
    }

    #[test]
    fn termination() {
        assert!(terminates(&BigRational::new(3.into(), 8.into())));
        assert!(terminates(&BigRational::new(7.into(), 20.into())));
        assert!(!terminates(&BigRational::new(22.into(), 7.into())));
        assert!(!terminates(&BigRational::new(1.into(), 3.into())));
    }

    #[test]
    fn deep_nesting_does_not_recurse_forever() {
        let s = format!("{}1{}", "(".repeat(5000), ")".repeat(5000));
        let _ = parse_answer(&s);
    }
}
