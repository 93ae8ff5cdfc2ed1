//! Checks every differentiable primitive of the tape against central
//! differences and prints one line per case.

use waitk::gradcheck::{check_case, primitive_suite};

fn main() -> waitk::Result<()> {
    let mut failures = 0;
    for case in primitive_suite() {
        let r = check_case(&case, 1e-5, 1e-4)?;
        failures += usize::from(!r.passed());
        println!(
            "{:<24} {:<22} {:>4} entries  max rel err {:.2e}  {}",
            r.op,
            r.shape,
            r.checked,
            r.max_rel_err,
            if r.passed() { "ok" } else { "MISMATCH" }
        );
    }
    println!("{failures} mismatching cases");
    Ok(())
}
