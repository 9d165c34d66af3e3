fn main() {
    std::process::exit(emp_core::cli::run_command(std::env::args_os()));
}
