#include "gazeclr/cli.hpp"

int main(int argc, char** argv) { return gazeclr::cli::run(argc, argv); }
