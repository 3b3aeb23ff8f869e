fn main() {
    std::process::exit(energy_attention_cli::run(std::env::args_os()));
}
