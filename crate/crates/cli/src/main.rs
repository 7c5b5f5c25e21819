use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    let out = neoclassical_cli::run_from_args(std::env::args_os());
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(out.stdout.as_bytes());
    let _ = stdout.flush();
    if let Some(line) = out.stderr {
        eprintln!("{line}");
    }
    ExitCode::from(out.code as u8)
}
