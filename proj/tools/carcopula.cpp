#include <carcopula/cli.hpp>

int main(int argc, char** argv) { return carcopula::cli::run_cli(argc, argv); }
