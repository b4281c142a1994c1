// Doc-tested book chapters; filled in alongside book/.
