use std::process::ExitCode;

fn main() -> ExitCode {
    ebike_agents::cli::main()
}
