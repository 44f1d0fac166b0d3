use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match crackscan::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = crackscan::exit_code(&err);
            match err.downcast_ref::<clap::Error>() {
                // clap renders help, version and usage errors itself.
                Some(e) => {
                    let _ = e.print();
                }
                None => eprintln!("error: {err:#}"),
            }
            ExitCode::from(code as u8)
        }
    }
}
