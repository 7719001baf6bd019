#include <massive/cli.hpp>

int main(int argc, char** argv) { return massive::cli::run(argc, argv); }
