#include "tdml/cli.hpp"

int main(int argc, char** argv) { return tdml::cli::main(argc, argv); }
