#include "clae/commands.hpp"

int main(int argc, char** argv) { return clae::run_cli(argc, argv); }
