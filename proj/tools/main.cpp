#include "cli.hpp"

int main(int argc, char** argv) { return deltakv::cli::run(argc, argv); }
