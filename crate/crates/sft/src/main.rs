fn main() {
    std::process::exit(sft::cli::main_entry());
}
