//! A scalar that counts every multiply-accumulate routed through `Real::mac`.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, MutexGuard};

use scenemixer::Real;

static MACS: AtomicU64 = AtomicU64::new(0);
static LOCK: Mutex<()> = Mutex::new(());

/// Holds the counter for the duration of a measurement; rayon workers may
/// bump it from other threads, so concurrent tests must not share it.
pub struct Session(#[allow(dead_code)] MutexGuard<'static, ()>);

impl Session {
    pub fn start() -> Self {
        let guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
        MACS.store(0, Ordering::SeqCst);
        Session(guard)
    }

    pub fn count(&self) -> u64 {
        MACS.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, PartialOrd)]
pub struct Counted(pub f64);

impl fmt::Display for Counted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident, $atr:ident, $am:ident, $op:tt) => {
        impl $tr for Counted {
            type Output = Counted;
            fn $m(self, rhs: Counted) -> Counted {
                Counted(self.0 $op rhs.0)
            }
        }
        impl $atr for Counted {
            fn $am(&mut self, rhs: Counted) {
                self.0 = self.0 $op rhs.0;
            }
        }
    };
}

binop!(Add, add, AddAssign, add_assign, +);
binop!(Sub, sub, SubAssign, sub_assign, -);
binop!(Mul, mul, MulAssign, mul_assign, *);

impl Div for Counted {
    type Output = Counted;
    fn div(self, rhs: Counted) -> Counted {
        Counted(self.0 / rhs.0)
    }
}

impl Neg for Counted {
    type Output = Counted;
    fn neg(self) -> Counted {
        Counted(-self.0)
    }
}

impl Real for Counted {
    fn zero() -> Self {
        Counted(0.0)
    }
    fn one() -> Self {
        Counted(1.0)
    }
    fn from_f64(v: f64) -> Self {
        Counted(v)
    }
    fn to_f64(self) -> f64 {
        self.0
    }
    fn sqrt(self) -> Self {
        Counted(self.0.sqrt())
    }
    fn exp(self) -> Self {
        Counted(self.0.exp())
    }
    fn ln(self) -> Self {
        Counted(self.0.ln())
    }
    fn erf(self) -> Self {
        Counted(libm::erf(self.0))
    }
    fn is_finite(self) -> bool {
        self.0.is_finite()
    }
    fn mac(acc: Self, a: Self, b: Self) -> Self {
        MACS.fetch_add(1, Ordering::Relaxed);
        Counted(acc.0 + a.0 * b.0)
    }
}
