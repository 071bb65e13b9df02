//! Adjoint dot tests for the forward operators and finite-difference checks
//! of the loss gradients. The same suites back `bpinn check`.

use bpinn::checks::{adjoint_suite, gradient_suite};
use bpinn::forward_ops::{adjoint_dot_test, compose, Convolution, Downsample, PsfKernel};

fn main() -> bpinn::Result<()> {
    // a 48x48 source, averaged down by 3 and blurred on the 16x16 grid
    let psf = PsfKernel::gaussian(5, 1.2)?;
    let h = compose(
        Convolution::shared((16, 16), psf)?,
        Downsample::shared((48, 48), 3)?,
    )?;
    println!(
        "superres operator, 50 trials: max relative gap {:.2e}",
        adjoint_dot_test(h.as_ref(), 50, 7)?
    );

    for c in adjoint_suite(false, 0)?
        .into_iter()
        .chain(gradient_suite(0)?)
    {
        let verdict = if c.passed() { "ok" } else { "FAILED" };
        println!(
            "{:<48} {:.2e} (tol {:.0e}) {verdict}",
            c.name, c.residual, c.tolerance
        );
    }

    // flipping the kernel is what makes the adjoint a correlation; leave it out and the test notices
    let bad = adjoint_suite(true, 0)?;
    println!(
        "with the unflipped adjoint: {} of {} checks fail",
        bad.iter().filter(|c| !c.passed()).count(),
        bad.len()
    );
    Ok(())
}
