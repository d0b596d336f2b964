use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = match chomsky_bench::parse_invocation(std::env::args_os()) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests exit 0; usage errors exit 2.
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let mut stdout = std::io::stdout().lock();
    match chomsky_bench::run(cli, &mut stdout) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
