use std::process::ExitCode;

fn main() -> ExitCode {
    pic_calibrate::cli::run(std::env::args_os())
}
