//! Relative compute overhead of keeping the index fresh, in exact rationals.

use num_rational::Ratio;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Exact = Ratio<u128>;

/// Parameter counts enter only through their ratio, so `p_retr` and `p_lm`
/// may be given as the numerator and denominator of that ratio.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModelParams {
    pub n: u128,
    pub b: u128,
    pub k: u128,
    pub r: u128,
    pub l: u128,
    pub p_retr: u128,
    pub p_lm: u128,
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("n", self.n),
            ("b", self.b),
            ("k", self.k),
            ("r", self.r),
            ("l", self.l),
            ("pretr", self.p_retr),
            ("plm", self.p_lm),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        Ok(())
    }

    /// Sets the parameter counts from their ratio `p_retr / p_lm`.
    pub fn with_ratio(mut self, ratio: Exact) -> Self {
        self.p_retr = *ratio.numer();
        self.p_lm = *ratio.denom();
        self
    }
}

/// `N·P_retr / (4·B·K·P_lm·R)`
pub fn overhead_full_refresh(p: &CostModelParams) -> Result<Exact> {
    p.validate()?;
    Ok(Exact::new(p.n * p.p_retr, 4 * p.b * p.k * p.p_lm * p.r))
}

/// `L·P_retr / (4·K·P_lm)`
pub fn overhead_rerank(p: &CostModelParams) -> Result<Exact> {
    p.validate()?;
    Ok(Exact::new(p.l * p.p_retr, 4 * p.k * p.p_lm))
}

/// Parses a plain decimal such as `0.04` or `3` into an exact ratio.
pub fn parse_decimal(s: &str) -> Result<Exact> {
    let bad = || Error::config("ratio", format!("{s:?} is not a positive decimal"));
    let s = s.trim();
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if int.is_empty() && frac.is_empty()
        || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit())
    {
        return Err(bad());
    }
    let digits = format!("{int}{frac}");
    let numer: u128 = digits.parse().map_err(|_| bad())?;
    let denom = 10u128.checked_pow(frac.len() as u32).ok_or_else(bad)?;
    let r = Exact::new(numer, denom);
    if r.is_zero() {
        return Err(bad());
    }
    Ok(r)
}

pub fn to_f64(r: &Exact) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Percentage rounded to one significant figure, e.g. `"~30%"`.
pub fn approx_percent(r: &Exact) -> String {
    let pct = to_f64(r) * 100.0;
    if pct <= 0.0 {
        return "~0%".into();
    }
    let magnitude = 10f64.powf(pct.log10().floor());
    let rounded = (pct / magnitude).round() * magnitude;
    if rounded >= 1.0 {
        format!("~{rounded:.0}%")
    } else {
        let places = (-magnitude.log10()).ceil() as usize;
        format!("~{rounded:.places$}%")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> CostModelParams {
        CostModelParams {
            n: 37_000_000,
            b: 64,
            k: 20,
            r: 1000,
            l: 200,
            p_retr: 1,
            p_lm: 25,
        }
    }

    #[test]
    fn full_refresh_examples() {
        let o = overhead_full_refresh(&base()).unwrap();
        assert_eq!(o, Exact::new(37, 128));
        assert_eq!(to_f64(&o), 0.2890625);
        assert_eq!(approx_percent(&o), "~30%");
        let half = CostModelParams { r: 500, ..base() };
        assert_eq!(overhead_full_refresh(&half).unwrap(), Exact::new(37, 64));
        let double = CostModelParams { r: 2000, ..base() };
        assert_eq!(overhead_full_refresh(&double).unwrap() * 2, o);
    }

    #[test]
    fn rerank_examples() {
        assert_eq!(overhead_rerank(&base()).unwrap(), Exact::new(1, 10));
        let l_eq_k = CostModelParams { l: 20, ..base() };
        assert_eq!(overhead_rerank(&l_eq_k).unwrap(), Exact::new(1, 100));
        let doubled = CostModelParams { l: 400, ..base() };
        assert_eq!(overhead_rerank(&doubled).unwrap(), Exact::new(1, 5));
        assert_eq!(approx_percent(&Exact::new(1, 10)), "~10%");
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!(parse_decimal("0.04").unwrap(), Exact::new(1, 25));
        assert_eq!(parse_decimal("3").unwrap(), Exact::from_integer(3));
        assert_eq!(parse_decimal(".5").unwrap(), Exact::new(1, 2));
        for bad in ["", ".", "-1", "1e3", "0", "abc"] {
            assert!(parse_decimal(bad).is_err(), "{bad}");
        }
        let p = base().with_ratio(parse_decimal("0.04").unwrap());
        assert_eq!((p.p_retr, p.p_lm), (1, 25));
    }

    #[test]
    fn zero_fields_are_rejected() {
        let err = overhead_rerank(&CostModelParams { k: 0, ..base() }).unwrap_err();
        assert!(err.to_string().contains("`k`"));
    }

    #[test]
    fn small_percentages_keep_one_figure() {
        assert_eq!(approx_percent(&Exact::new(1, 100)), "~1%");
        assert_eq!(approx_percent(&Exact::new(3, 1000)), "~0.3%");
        assert_eq!(approx_percent(&Exact::new(37, 64)), "~60%");
    }
}
