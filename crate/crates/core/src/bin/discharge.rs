fn main() {
    std::process::exit(discharge_llm::cli::main());
}
