use ocreplay::model::gradcheck::{random_cases, run_gradcheck, GradCheckReport};

use crate::CliError;

pub fn run(cases: usize, seed: u64, inject_fault: Option<&str>) -> Result<GradCheckReport, CliError> {
    if cases == 0 {
        return Err(CliError::Usage(anyhow::anyhow!("at least one case is needed")));
    }
    run_gradcheck(&random_cases(cases, seed), inject_fault).map_err(|e| CliError::Usage(e.into()))
}

pub fn format_report(report: &GradCheckReport) -> String {
    let mut s = String::new();
    for c in &report.cases {
        let k = &c.case;
        s.push_str(&format!(
            "case seed={} input={} hidden={:?} latent={} batch={} classes={}: max {:.3e}\n",
            k.seed,
            k.input_dim,
            k.hidden,
            k.latent_dim,
            k.batch,
            k.classes,
            c.max_error()
        ));
    }
    s.push_str("\nparameter group            max relative error\n");
    for (group, err) in report.by_group() {
        let flag = if err < report.tolerance { "" } else { "  FAIL" };
        s.push_str(&format!("{group:<26} {err:.3e}{flag}\n"));
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    s.push_str(&format!(
        "\n{verdict}: max relative error {:.3e} (tolerance {:.0e})\n",
        report.max_error(),
        report.tolerance
    ));
    for (seed, g) in report.failures() {
        s.push_str(&format!(
            "  failed: {} in case seed={seed} ({:.3e})\n",
            g.group, g.max_error
        ));
    }
    s
}
