fn main() {
    std::process::exit(cpaem::cli::main_entry());
}
