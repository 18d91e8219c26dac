use std::collections::BTreeMap;
use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    let env: BTreeMap<String, String> = std::env::vars().collect();
    let code = mqseq_cli::run(std::env::args_os(), &env, &mut io::stdout(), &mut io::stderr());
    ExitCode::from(code as u8)
}
